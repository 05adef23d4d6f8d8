#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "latfuse/errors.hpp"
#include "latfuse/tensor.hpp"

namespace latfuse {

using Mat34 = std::array<std::array<double, 4>, 3>;
using Mat44 = std::array<std::array<double, 4>, 4>;

inline Mat44 mat44_identity() {
  Mat44 m{};
  for (int i = 0; i < 4; ++i) m[i][i] = 1.0;
  return m;
}

inline Mat44 mat44_mul(const Mat44& a, const Mat44& b) {
  Mat44 out{};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      for (int k = 0; k < 4; ++k) out[r][c] += a[r][k] * b[k][c];
  return out;
}

inline Mat34 mat34_mul44(const Mat34& a, const Mat44& b) {
  Mat34 out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      for (int k = 0; k < 4; ++k) out[r][c] += a[r][k] * b[k][c];
  return out;
}

/// Projection chain from LiDAR coordinates to image pixels:
/// camera intrinsics (3x4), rectification, and the rigid LiDAR-to-camera
/// transform, stored in homogeneous form exactly as embedded from the KITTI
/// calibration text.
struct Calibration {
  Mat34 cam_projection{};   // P2
  Mat44 rect{};             // R0_rect embedded into 4x4
  Mat44 lidar_to_cam{};     // Tr_velo_to_cam embedded into 4x4
  int image_h = 370;
  int image_w = 1224;

  Mat34 composed() const { return mat34_mul44(cam_projection, mat44_mul(rect, lidar_to_cam)); }

  /// Checks the structural invariants: orthonormal rectification block,
  /// homogeneous bottom rows, full-row-rank composed matrix.
  void validate() const {
    for (int c = 0; c < 4; ++c) {
      const double want = c == 3 ? 1.0 : 0.0;
      if (rect[3][c] != want || lidar_to_cam[3][c] != want)
        throw ContractError("calibration: bottom homogeneous row is not (0,0,0,1)");
    }
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += rect[k][i] * rect[k][j];
        const double want = i == j ? 1.0 : 0.0;
        if (std::abs(acc - want) > 1e-4)
          throw ContractError("calibration: rectification block is not orthonormal");
      }
    }
    if (row_rank_3x4(composed()) < 3)
      throw ContractError("calibration: composed projection is rank deficient");
  }

 private:
  static int row_rank_3x4(Mat34 m) {
    int rank = 0;
    for (int col = 0; col < 4 && rank < 3; ++col) {
      int pivot = -1;
      double best = 1e-10;
      for (int r = rank; r < 3; ++r) {
        if (std::abs(m[r][col]) > best) {
          best = std::abs(m[r][col]);
          pivot = r;
        }
      }
      if (pivot < 0) continue;
      std::swap(m[rank], m[pivot]);
      for (int r = rank + 1; r < 3; ++r) {
        const double f = m[r][col] / m[rank][col];
        for (int c = col; c < 4; ++c) m[r][c] -= f * m[rank][c];
      }
      ++rank;
    }
    return rank;
  }
};

namespace detail {

inline double parse_double_token(std::string_view tok, int line_no) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ParseError("calib: bad float '" + std::string(tok) + "' on line " +
                     std::to_string(line_no));
  return v;
}

inline bool split_calib_line(const std::string& line, std::string& key,
                             std::vector<std::string_view>& tokens) {
  const auto colon = line.find(':');
  if (colon == std::string::npos) return false;
  key = line.substr(0, colon);
  while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
  tokens.clear();
  std::size_t i = colon + 1;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) tokens.emplace_back(line.data() + i, j - i);
    i = j;
  }
  return !key.empty();
}

}  // namespace detail

/// Parses KITTI-format calibration text. Requires keys P2 (12 floats),
/// R0_rect (9 floats), Tr_velo_to_cam (12 floats); other keys are ignored.
/// Parsing uses std::from_chars and is locale independent.
inline Calibration parse_kitti_calib(const std::string& text, int image_h = 370,
                                     int image_w = 1224) {
  bool have_p2 = false, have_r0 = false, have_tr = false;
  Calibration calib;
  calib.image_h = image_h;
  calib.image_w = image_w;
  calib.rect = mat44_identity();
  calib.lidar_to_cam = mat44_identity();

  std::istringstream is(text);
  std::string line, key;
  std::vector<std::string_view> tokens;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!detail::split_calib_line(line, key, tokens)) continue;
    auto expect = [&](std::size_t n) {
      if (tokens.size() != n)
        throw ParseError("calib: key '" + key + "' expects " + std::to_string(n) +
                         " values, got " + std::to_string(tokens.size()) + " on line " +
                         std::to_string(line_no));
    };
    if (key == "P2") {
      expect(12);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
          calib.cam_projection[r][c] = detail::parse_double_token(tokens[r * 4 + c], line_no);
      have_p2 = true;
    } else if (key == "R0_rect") {
      expect(9);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          calib.rect[r][c] = detail::parse_double_token(tokens[r * 3 + c], line_no);
      have_r0 = true;
    } else if (key == "Tr_velo_to_cam") {
      expect(12);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
          calib.lidar_to_cam[r][c] = detail::parse_double_token(tokens[r * 4 + c], line_no);
      have_tr = true;
    }
  }
  if (!have_p2) throw ParseError("calib: missing key 'P2'");
  if (!have_r0) throw ParseError("calib: missing key 'R0_rect'");
  if (!have_tr) throw ParseError("calib: missing key 'Tr_velo_to_cam'");
  calib.validate();
  return calib;
}

/// Serializes back to KITTI text with round-trip-exact float formatting.
inline std::string serialize_kitti_calib(const Calibration& calib) {
  auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "P2:";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) os << ' ' << fmt(calib.cam_projection[r][c]);
  os << "\nR0_rect:";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) os << ' ' << fmt(calib.rect[r][c]);
  os << "\nTr_velo_to_cam:";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) os << ' ' << fmt(calib.lidar_to_cam[r][c]);
  os << '\n';
  return os.str();
}

/// Continuous pixel coordinates for a batch of projected 3D points, kept
/// index-aligned with the input: invalid projections are flagged, never
/// dropped.
template <typename S>
struct PixelCoords {
  Tensor<S> uv;                 // M x 2
  std::vector<std::uint8_t> valid;  // depth > 0 and inside the image

  std::size_t size() const { return valid.size(); }

  double valid_fraction() const {
    if (valid.empty()) return 0.0;
    std::size_t n = 0;
    for (auto v : valid) n += v;
    return static_cast<double>(n) / static_cast<double>(valid.size());
  }
};

/// Homogeneous projection of metric points (M x 3, LiDAR frame) through the
/// composed calibration chain with perspective divide. A point is valid when
/// its camera depth (the homogeneous w) is positive and (u, v) falls inside
/// the image. Invalid rows get uv = (0, 0).
template <typename S>
PixelCoords<S> project_points(const Tensor<S>& centers, const Calibration& calib) {
  centers.require_ndim(2);
  if (centers.cols() != 3)
    throw ShapeError("project_points: expected M x 3 centers, got " + centers.shape_string());
  const Mat34 cm = calib.composed();
  const std::size_t m = centers.rows();
  PixelCoords<S> out;
  out.uv = Tensor<S>({m, 2});
  out.valid.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const double x = static_cast<double>(centers.at(i, 0));
    const double y = static_cast<double>(centers.at(i, 1));
    const double z = static_cast<double>(centers.at(i, 2));
    const double hu = cm[0][0] * x + cm[0][1] * y + cm[0][2] * z + cm[0][3];
    const double hv = cm[1][0] * x + cm[1][1] * y + cm[1][2] * z + cm[1][3];
    const double hw = cm[2][0] * x + cm[2][1] * y + cm[2][2] * z + cm[2][3];
    if (hw > 0.0) {
      const double u = hu / hw;
      const double v = hv / hw;
      out.uv.at(i, 0) = static_cast<S>(u);
      out.uv.at(i, 1) = static_cast<S>(v);
      out.valid[i] = (u >= 0.0 && u < calib.image_w && v >= 0.0 && v < calib.image_h) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace latfuse
