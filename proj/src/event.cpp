#include "mambatrack/event.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mambatrack/ops.hpp"

namespace mambatrack {

void EventStream::validate() const {
  int64_t prev = INT64_MIN;
  for (const Event& e : events) {
    if (e.p != 1 && e.p != -1)
      throw std::invalid_argument("event: polarity must be +1 or -1, got " + std::to_string(e.p));
    if (e.x < 0 || e.x >= sensor_w || e.y < 0 || e.y >= sensor_h)
      throw std::invalid_argument("event: pixel (" + std::to_string(e.x) + "," +
                                  std::to_string(e.y) + ") outside sensor " +
                                  std::to_string(sensor_w) + "x" + std::to_string(sensor_h));
    if (e.t < prev) throw std::invalid_argument("event: timestamps must be non-decreasing");
    prev = e.t;
  }
}

TimeSurface voxelize(const EventStream& stream, int64_t t_ref, int64_t delta_t,
                     int H, int W) {
  if (delta_t <= 0)
    throw std::invalid_argument("voxelize: delta_t must be positive, got " +
                                std::to_string(delta_t));
  if (H <= 0 || W <= 0) throw std::invalid_argument("voxelize: grid dims must be positive");
  TimeSurface surf;
  surf.grid = Tensor::zeros({H, W});
  surf.t_ref = t_ref;
  surf.delta_t = delta_t;
  const double sx = stream.sensor_w > 0 ? static_cast<double>(W) / stream.sensor_w : 1.0;
  const double sy = stream.sensor_h > 0 ? static_cast<double>(H) / stream.sensor_h : 1.0;
  double* g = surf.grid.data();
  for (const Event& e : stream.events) {
    const double dist = std::fabs(static_cast<double>(t_ref - e.t));
    const double weight = 1.0 - dist / static_cast<double>(delta_t);
    if (weight <= 0.0) continue;
    int cx = static_cast<int>(e.x * sx);
    int cy = static_cast<int>(e.y * sy);
    if (cx < 0 || cx >= W || cy < 0 || cy >= H) continue;
    g[cy * W + cx] += e.p * weight;
    ++surf.contributing_count;
  }
  surf.density = static_cast<double>(surf.contributing_count) / (static_cast<double>(H) * W);
  return surf;
}

double event_density(const TimeSurface& surface) { return surface.density; }

namespace {

struct CropWindow {
  double origin_x, origin_y;  // image coords of the crop's top-left corner
  double step;                // image pixels per output pixel
};

CropWindow crop_window(const BBox& box, double context_factor, int out_size) {
  if (!box.valid())
    throw std::invalid_argument("crop_patch: degenerate box w=" + std::to_string(box.w) +
                                " h=" + std::to_string(box.h));
  if (context_factor < 1.0)
    throw std::invalid_argument("crop_patch: context_factor must be >= 1");
  if (out_size <= 0) throw std::invalid_argument("crop_patch: out_size must be positive");
  const double side = context_factor * std::sqrt(box.w * box.h);
  CropWindow win;
  win.origin_x = box.cx - side / 2.0;
  win.origin_y = box.cy - side / 2.0;
  win.step = side / out_size;
  return win;
}

}  // namespace

Tensor crop_patch(const Tensor& image, const BBox& box, double context_factor, int out_size) {
  if (image.rank() != 3)
    throw std::invalid_argument("crop_patch: expected image [H,W,C], got " + image.shape_str());
  const int64_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  const CropWindow win = crop_window(box, context_factor, out_size);
  Tensor out = Tensor::zeros({out_size, out_size, C});
  const double* src = image.data();
  double* dst = out.data();
  for (int oy = 0; oy < out_size; ++oy) {
    // Sample position in continuous image coords; pixel i is centered at i+0.5.
    const double v = win.origin_y + (oy + 0.5) * win.step - 0.5;
    const int64_t y0 = static_cast<int64_t>(std::floor(v));
    const double wy = v - static_cast<double>(y0);
    for (int ox = 0; ox < out_size; ++ox) {
      const double u = win.origin_x + (ox + 0.5) * win.step - 0.5;
      const int64_t x0 = static_cast<int64_t>(std::floor(u));
      const double wx = u - static_cast<double>(x0);
      for (int64_t c = 0; c < C; ++c) {
        auto tap = [&](int64_t yy, int64_t xx) -> double {
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
          return src[(yy * W + xx) * C + c];
        };
        const double val = (1 - wy) * ((1 - wx) * tap(y0, x0) + wx * tap(y0, x0 + 1)) +
                           wy * ((1 - wx) * tap(y0 + 1, x0) + wx * tap(y0 + 1, x0 + 1));
        dst[(static_cast<int64_t>(oy) * out_size + ox) * C + c] = val;
      }
    }
  }
  return out;
}

BBox box_to_crop(const BBox& box, const BBox& window, double context_factor, int out_size) {
  const CropWindow win = crop_window(window, context_factor, out_size);
  BBox out;
  out.cx = (box.cx - win.origin_x) / win.step;
  out.cy = (box.cy - win.origin_y) / win.step;
  out.w = box.w / win.step;
  out.h = box.h / win.step;
  return out;
}

BBox box_from_crop(const BBox& box_in_crop, const BBox& window, double context_factor,
                   int out_size) {
  const CropWindow win = crop_window(window, context_factor, out_size);
  BBox out;
  out.cx = box_in_crop.cx * win.step + win.origin_x;
  out.cy = box_in_crop.cy * win.step + win.origin_y;
  out.w = box_in_crop.w * win.step;
  out.h = box_in_crop.h * win.step;
  return out;
}

Tensor patch_embed(const Tensor& grid, int patch, const Tensor& W_e, const Tensor& pos) {
  Tensor tokens = ops::linear(ops::extract_patches(grid, patch), W_e);
  if (pos.shape() != tokens.shape())
    throw std::invalid_argument("patch_embed: positional encoding " + pos.shape_str() +
                                " does not match tokens " + tokens.shape_str());
  return ops::add(tokens, pos);
}

}  // namespace mambatrack
