#pragma once

#include <cstdint>
#include <vector>

#include "mambatrack/tensor.hpp"

namespace mambatrack {

/// One asynchronous brightness-change event.
struct Event {
  int32_t x = 0;       // pixel column
  int32_t y = 0;       // pixel row
  int64_t t = 0;       // timestamp, microseconds
  int32_t p = 1;       // polarity, +1 or -1
};

/// Time-ordered event container with the emitting sensor's dimensions.
struct EventStream {
  std::vector<Event> events;
  int32_t sensor_h = 0;
  int32_t sensor_w = 0;

  /// Checks polarity, bounds, and non-decreasing timestamps.
  void validate() const;
};

/// Frame-aligned signed accumulation grid with its event density.
struct TimeSurface {
  Tensor grid;                    // [H,W], signed
  int64_t t_ref = 0;              // reference timestamp, us
  int64_t delta_t = 0;            // window half-extent, us
  int64_t contributing_count = 0; // events with strictly positive weight
  double density = 0.0;           // contributing_count / (H*W)
};

/// Center-extent box in pixels.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;
  bool valid() const { return w > 0 && h > 0; }
  double x0() const { return cx - w / 2; }
  double y0() const { return cy - h / 2; }
  double x1() const { return cx + w / 2; }
  double y1() const { return cy + h / 2; }
};

/// Accumulates each event into its cell with weight p * max(0, 1 - |t_ref -
/// t|/delta_t). Grid cells rescale from sensor dims when H,W differ.
TimeSurface voxelize(const EventStream& stream, int64_t t_ref, int64_t delta_t,
                     int H, int W);

/// Contributing-event count normalized by grid area.
double event_density(const TimeSurface& surface);

/// Square crop of side context_factor * sqrt(w*h) centered on the box,
/// bilinearly resized to out_size with half-pixel-center alignment;
/// out-of-image samples are zero.
Tensor crop_patch(const Tensor& image, const BBox& box, double context_factor,
                  int out_size);

/// Maps a box given in image coordinates into the pixel coordinates of the
/// crop produced by crop_patch with the same window.
BBox box_to_crop(const BBox& box, const BBox& window, double context_factor, int out_size);
/// Inverse of box_to_crop.
BBox box_from_crop(const BBox& box_in_crop, const BBox& window, double context_factor,
                   int out_size);

/// Non-overlapping patch flattening, linear projection, additive positional
/// encoding. Tokens are row-major over the patch grid.
Tensor patch_embed(const Tensor& grid, int patch, const Tensor& W_e, const Tensor& pos);

}  // namespace mambatrack
