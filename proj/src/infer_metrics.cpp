#include "lunardem/infer_metrics.hpp"

#include "lunardem/error.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace lunardem {

namespace fs = std::filesystem;

template <typename Scalar>
Tensor<Scalar> predict_relative(const LunarDepthNet<Scalar>& model, const Tensor<Scalar>& images) {
  return model.forward(images, false).elevation;
}

template <typename Scalar>
RowMatrix<double> predict_relative(const LunarDepthNet<Scalar>& model, const RowMatrix<double>& image) {
  Tensor<Scalar> t(1, 1, static_cast<int>(image.rows()), static_cast<int>(image.cols()));
  t.image(0, 0) = image.cast<Scalar>();
  return predict_relative(model, t).image(0, 0).template cast<double>();
}

RowMatrix<double> predict_absolute(const RowMatrix<double>& relative, double z_min, double z_ptp) {
  if (z_ptp < 0.0) throw Error(ErrorKind::NegativePtp, "z_ptp must be non-negative, got " + std::to_string(z_ptp));
  return (relative.array() * z_ptp + z_min).matrix();
}

namespace {

void check_pair(const RowMatrix<double>& pred, const RowMatrix<double>& truth, const MaskMatrix& mask) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols() || mask.rows() != truth.rows() ||
      mask.cols() != truth.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "prediction, truth and mask shapes differ");
  }
}

struct PixelSums {
  double abs = 0.0, sq = 0.0, lo = 0.0, hi = 0.0;
  long n = 0;
};

PixelSums pixel_sums(const RowMatrix<double>& pred, const RowMatrix<double>& truth, const MaskMatrix& mask) {
  check_pair(pred, truth, mask);
  PixelSums s;
  for (Eigen::Index r = 0; r < truth.rows(); ++r)
    for (Eigen::Index c = 0; c < truth.cols(); ++c) {
      if (!mask(r, c)) continue;
      const double d = pred(r, c) - truth(r, c);
      s.abs += std::abs(d);
      s.sq += d * d;
      s.lo = s.n ? std::min(s.lo, truth(r, c)) : truth(r, c);
      s.hi = s.n ? std::max(s.hi, truth(r, c)) : truth(r, c);
      ++s.n;
    }
  if (s.n == 0) throw Error(ErrorKind::EmptyMask, "no valid pixel to score");
  return s;
}

std::optional<double> nrmse_from(const PixelSums& s) {
  const double range = s.hi - s.lo;
  if (range < 1e-9) return std::nullopt;
  return std::sqrt(s.sq / static_cast<double>(s.n)) / range;
}

}  // namespace

double mae(const RowMatrix<double>& pred, const RowMatrix<double>& truth, const MaskMatrix& mask) {
  const PixelSums s = pixel_sums(pred, truth, mask);
  return s.abs / static_cast<double>(s.n);
}

std::optional<double> nrmse_tile(const RowMatrix<double>& pred, const RowMatrix<double>& truth,
                                 const MaskMatrix& mask) {
  return nrmse_from(pixel_sums(pred, truth, mask));
}

std::string to_string(EvalMode mode) { return mode == EvalMode::relative ? "relative" : "absolute"; }

EvalMode eval_mode_from_string(const std::string& name) {
  if (name == "relative") return EvalMode::relative;
  if (name == "absolute") return EvalMode::absolute;
  throw Error(ErrorKind::BadConfig, "unknown mode '" + name + "' (relative, absolute)");
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json tiles = nlohmann::json::array();
  for (const auto& t : r.tiles) {
    tiles.push_back({{"tile_id", t.tile_id},
                     {"mae", t.mae},
                     {"nrmse", t.nrmse ? nlohmann::json(*t.nrmse) : nlohmann::json(nullptr)}});
  }
  j = {{"mode", to_string(r.mode)},
       {"mae_m", r.mae_m ? nlohmann::json(*r.mae_m) : nlohmann::json(nullptr)},
       {"mae_rel", r.mae_rel},
       {"per_tile_nrmse", r.per_tile_nrmse},
       {"mean_nrmse", r.mean_nrmse},
       {"n_tiles", r.n_tiles},
       {"n_skipped", r.n_skipped},
       {"tiles", tiles}};
}

void write_metrics_json(const MetricsReport& report, const fs::path& path) {
  std::ofstream out(path);
  out << nlohmann::json(report).dump(2) << "\n";
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

template <typename Scalar>
MetricsReport evaluate_store(const Predictor<Scalar>& predictor, const TileStore& store, Split split, EvalMode mode,
                             int batch_size) {
  const auto indices = store.indices(split);
  if (indices.empty()) throw Error(ErrorKind::EmptySplit, "split '" + to_string(split) + "' is empty");
  if (mode == EvalMode::absolute) {
    for (auto i : indices) {
      const auto& m = store.entries()[i].meta;
      if (!m.has_stats()) throw Error(ErrorKind::MissingMetadata, "tile " + m.tile_id() + " has no z_min/z_ptp");
    }
  }
  MetricsReport report;
  report.mode = mode;
  double abs_rel = 0.0, abs_m = 0.0;
  long pixels = 0;
  const auto step = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < indices.size(); start += step) {
    const std::vector<std::size_t> ids(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                       indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + step)));
    const Batch<Scalar> batch = load_batch<Scalar>(store, ids);
    const Tensor<Scalar> elevation = predictor(batch).elevation;
    if (elevation.shape() != batch.dems.shape()) throw Error(ErrorKind::BadShape, "predictor output shape differs");
    for (int b = 0; b < static_cast<int>(ids.size()); ++b) {
      const auto& meta = batch.meta[static_cast<std::size_t>(b)];
      const RowMatrix<double> pred = elevation.image(b, 0).template cast<double>();
      const RowMatrix<double> truth = batch.dems.image(b, 0).template cast<double>();
      const MaskMatrix mask = (batch.masks.image(b, 0).array() > Scalar(0.5)).template cast<std::uint8_t>();
      const PixelSums rel = pixel_sums(pred, truth, mask);
      abs_rel += rel.abs;
      pixels += rel.n;
      TileMetrics tm{meta.tile_id(), rel.abs / static_cast<double>(rel.n), nrmse_from(rel)};
      if (mode == EvalMode::absolute) {
        // both sides through the same post-hoc map, so truth is recovered to within epsilon
        const PixelSums m = pixel_sums(predict_absolute(pred, meta.z_min, meta.z_ptp),
                                       predict_absolute(truth, meta.z_min, meta.z_ptp), mask);
        abs_m += m.abs;
        tm.mae = m.abs / static_cast<double>(m.n);
        tm.nrmse = nrmse_from(m);
      }
      if (tm.nrmse) {
        report.per_tile_nrmse.push_back(*tm.nrmse);
      } else {
        ++report.n_skipped;
      }
      report.tiles.push_back(std::move(tm));
      ++report.n_tiles;
    }
  }
  report.mae_rel = abs_rel / static_cast<double>(pixels);
  if (mode == EvalMode::absolute) report.mae_m = abs_m / static_cast<double>(pixels);
  double sum = 0.0;
  for (double v : report.per_tile_nrmse) sum += v;
  report.mean_nrmse = report.per_tile_nrmse.empty() ? 0.0 : sum / static_cast<double>(report.per_tile_nrmse.size());
  return report;
}

template <typename Scalar>
MetricsReport evaluate_store(const LunarDepthNet<Scalar>& model, const TileStore& store, Split split, EvalMode mode,
                             int batch_size) {
  const Predictor<Scalar> fn = [&model](const Batch<Scalar>& b) { return model.forward(b.images, false); };
  return evaluate_store(fn, store, split, mode, batch_size);
}

double train_target_mean(const TileStore& store) {
  const auto indices = store.indices(Split::train);
  if (indices.empty()) throw Error(ErrorKind::EmptySplit, "train split is empty");
  double sum = 0.0;
  long n = 0;
  for (auto i : indices) {
    const TileRecord rec = store.load(i);
    for (Eigen::Index k = 0; k < rec.dem.size(); ++k) {
      if (rec.mask.data()[k]) {
        sum += rec.dem.data()[k];
        ++n;
      }
    }
  }
  if (n == 0) throw Error(ErrorKind::EmptySplit, "train split has no valid pixels");
  return sum / static_cast<double>(n);
}

template <typename Scalar>
Predictor<Scalar> constant_predictor(double value) {
  return [value](const Batch<Scalar>& b) {
    Tensor<Scalar> e(b.dems.shape());
    e.vec().setConstant(static_cast<Scalar>(value));
    return ModelOutput<Scalar>{std::move(e), Tensor<Scalar>(static_cast<int>(b.meta.size()), 2, 1, 1)};
  };
}

double bilinear_at(const RowMatrix<double>& grid, double row, double col) {
  const auto h = grid.rows(), w = grid.cols();
  const Eigen::Index r0 = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(row)), 0, std::max<Eigen::Index>(h - 2, 0));
  const Eigen::Index c0 = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(col)), 0, std::max<Eigen::Index>(w - 2, 0));
  const Eigen::Index r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  const double fr = row - static_cast<double>(r0), fc = col - static_cast<double>(c0);
  return (1 - fr) * ((1 - fc) * grid(r0, c0) + fc * grid(r0, c1)) + fr * ((1 - fc) * grid(r1, c0) + fc * grid(r1, c1));
}

ElevationProfile extract_profile(const RowMatrix<double>& truth, const RowMatrix<double>& pred, const ProfileLine& line,
                                 double pixel_scale, EvalMode mode) {
  if (truth.rows() != pred.rows() || truth.cols() != pred.cols() || truth.size() == 0) {
    throw Error(ErrorKind::ShapeMismatch, "truth and prediction tiles differ in shape");
  }
  const double hmax = static_cast<double>(truth.rows() - 1), wmax = static_cast<double>(truth.cols() - 1);
  for (auto [r, c] : {std::pair{line.r0, line.c0}, std::pair{line.r1, line.c1}}) {
    if (!(r >= 0.0 && r <= hmax && c >= 0.0 && c <= wmax)) {
      std::ostringstream s;
      s << "endpoint (" << r << ", " << c << ") outside the " << truth.rows() << "x" << truth.cols() << " tile";
      throw Error(ErrorKind::OutOfBounds, s.str());
    }
  }
  if (!(pixel_scale > 0.0)) throw Error(ErrorKind::BadConfig, "pixel_scale must be positive");
  const double dr = line.r1 - line.r0, dc = line.c1 - line.c0;
  const double length = std::hypot(dr, dc);
  const auto n = static_cast<int>(std::floor(length)) + 1;
  ElevationProfile p;
  p.mode = mode;
  for (int k = 0; k < n; ++k) {
    const double t = length > 0.0 ? k / length : 0.0;
    const double r = line.r0 + t * dr, c = line.c0 + t * dc;
    p.distance_m.push_back(k * pixel_scale);
    p.truth.push_back(bilinear_at(truth, r, c));
    p.pred.push_back(bilinear_at(pred, r, c));
  }
  return p;
}

void write_profile_csv(const ElevationProfile& profile, const fs::path& path) {
  std::ofstream out(path);
  out << "distance_m,truth,pred\n";
  char buf[128];
  for (std::size_t i = 0; i < profile.distance_m.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f,%.9g,%.9g\n", profile.distance_m[i], profile.truth[i], profile.pred[i]);
    out << buf;
  }
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

std::string axis_label(EvalMode mode) {
  return mode == EvalMode::relative ? "relative elevation [0–1]" : "elevation (m)";
}

namespace {

struct PlotFrame {
  double width = 720, height = 420;
  double left = 80, right = 20, top = 40, bottom = 60;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

PlotFrame frame_for(const ElevationProfile& p) {
  PlotFrame f;
  if (!p.distance_m.empty()) {
    f.x0 = p.distance_m.front();
    f.x1 = p.distance_m.back();
    const auto [tlo, thi] = std::minmax_element(p.truth.begin(), p.truth.end());
    const auto [plo, phi] = std::minmax_element(p.pred.begin(), p.pred.end());
    f.y0 = std::min(*tlo, *plo);
    f.y1 = std::max(*thi, *phi);
  }
  if (f.x1 <= f.x0) f.x1 = f.x0 + 1.0;
  const double pad = f.y1 > f.y0 ? 0.05 * (f.y1 - f.y0) : 0.5;
  f.y0 -= pad;
  f.y1 += pad;
  return f;
}

std::string fmt(double v, const char* spec = "%.2f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += ch;
    }
  }
  return out;
}

void render_svg(const ElevationProfile& p, const fs::path& path, const std::string& title) {
  const PlotFrame f = frame_for(p);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << f.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << xml_escape(title + " (" + to_string(p.mode) + " mode)") << "</text>\n";
  const double xa = f.px(f.x0), xb = f.px(f.x1), ya = f.py(f.y0), yb = f.py(f.y1);
  s << "<path d=\"M" << fmt(xa) << " " << fmt(yb) << " V" << fmt(ya) << " H" << fmt(xb)
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x0 + k * (f.x1 - f.x0) / 4, yv = f.y0 + k * (f.y1 - f.y0) / 4;
    s << "<text x=\"" << fmt(f.px(xv)) << "\" y=\"" << fmt(ya + 18) << "\" text-anchor=\"middle\">" << fmt(xv, "%.4g")
      << "</text>\n";
    s << "<text x=\"" << fmt(xa - 6) << "\" y=\"" << fmt(f.py(yv) + 4) << "\" text-anchor=\"end\">"
      << fmt(yv, "%.4g") << "</text>\n";
  }
  s << "<text x=\"" << fmt((xa + xb) / 2) << "\" y=\"" << fmt(f.height - 15)
    << "\" text-anchor=\"middle\">distance (m)</text>\n";
  s << "<text transform=\"translate(18 " << fmt((ya + yb) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(axis_label(p.mode)) << "</text>\n";
  auto series = [&](const std::vector<double>& ys, const char* color, const char* name, double legend_y) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) {
      s << (i ? " " : "") << fmt(f.px(p.distance_m[i])) << "," << fmt(f.py(ys[i]));
    }
    s << "\"><title>" << name << "</title></polyline>\n";
    s << "<line x1=\"" << fmt(xb - 110) << "\" y1=\"" << legend_y << "\" x2=\"" << fmt(xb - 90) << "\" y2=\""
      << legend_y << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << fmt(xb - 84) << "\" y=\"" << legend_y + 4 << "\">" << name << "</text>\n";
  };
  series(p.truth, "green", "truth", 50);
  series(p.pred, "red", "prediction", 66);
  s << "</svg>\n";
  std::ofstream out(path, std::ios::binary);
  out << s.str();
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

// Hershey fonts are ASCII only.
std::string ascii(std::string s) {
  const std::string dash = "–";
  for (auto pos = s.find(dash); pos != std::string::npos; pos = s.find(dash)) s.replace(pos, dash.size(), "-");
  return s;
}

void render_png(const ElevationProfile& p, const fs::path& path, const std::string& title) {
  const PlotFrame f = frame_for(p);
  cv::Mat img(static_cast<int>(f.height), static_cast<int>(f.width), CV_8UC3, cv::Scalar(255, 255, 255));
  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  const cv::Scalar black(0, 0, 0);
  auto pt = [&](double x, double y) { return cv::Point(static_cast<int>(std::lround(f.px(x))), static_cast<int>(std::lround(f.py(y)))); };
  cv::putText(img, ascii(title + " (" + to_string(p.mode) + " mode)"), {static_cast<int>(f.left), 24}, font, 0.55, black, 1,
              cv::LINE_AA);
  cv::line(img, pt(f.x0, f.y1), pt(f.x0, f.y0), black, 1);
  cv::line(img, pt(f.x0, f.y0), pt(f.x1, f.y0), black, 1);
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x0 + k * (f.x1 - f.x0) / 4, yv = f.y0 + k * (f.y1 - f.y0) / 4;
    cv::putText(img, fmt(xv, "%.4g"), pt(xv, f.y0) + cv::Point(-12, 18), font, 0.4, black, 1, cv::LINE_AA);
    cv::putText(img, fmt(yv, "%.4g"), pt(f.x0, yv) + cv::Point(-52, 4), font, 0.4, black, 1, cv::LINE_AA);
  }
  cv::putText(img, "distance (m)", {static_cast<int>(f.width / 2 - 40), static_cast<int>(f.height - 12)}, font, 0.45,
              black, 1, cv::LINE_AA);
  // vertical label: draw horizontally, then rotate into place
  const std::string ylabel = ascii(axis_label(p.mode));
  int base = 0;
  const cv::Size ts = cv::getTextSize(ylabel, font, 0.45, 1, &base);
  cv::Mat strip(ts.height + base + 4, ts.width + 4, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(strip, ylabel, {2, ts.height + 1}, font, 0.45, black, 1, cv::LINE_AA);
  cv::rotate(strip, strip, cv::ROTATE_90_COUNTERCLOCKWISE);
  const int yoff = std::max(0, static_cast<int>((f.py(f.y0) + f.py(f.y1)) / 2) - strip.rows / 2);
  if (yoff + strip.rows <= img.rows && strip.cols + 4 <= img.cols) strip.copyTo(img(cv::Rect(4, yoff, strip.cols, strip.rows)));

  auto series = [&](const std::vector<double>& ys, const cv::Scalar& color, const std::string& name, int legend_y) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < ys.size(); ++i) pts.push_back(pt(p.distance_m[i], ys[i]));
    if (pts.size() == 1) cv::circle(img, pts[0], 2, color, cv::FILLED, cv::LINE_AA);
    cv::polylines(img, pts, false, color, 1, cv::LINE_AA);
    const int lx = static_cast<int>(f.width - f.right - 110);
    cv::line(img, {lx, legend_y}, {lx + 20, legend_y}, color, 2);
    cv::putText(img, name, {lx + 26, legend_y + 4}, font, 0.45, black, 1, cv::LINE_AA);
  };
  series(p.truth, cv::Scalar(0, 140, 0), "truth", 50);
  series(p.pred, cv::Scalar(0, 0, 220), "prediction", 66);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception& e) {
    throw Error(ErrorKind::IoFailure, "cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

}  // namespace

void render_profile_figure(const ElevationProfile& profile, const fs::path& path, const std::string& title) {
  if (profile.distance_m.empty() || profile.truth.size() != profile.distance_m.size() ||
      profile.pred.size() != profile.distance_m.size()) {
    throw Error(ErrorKind::BadConfig, "profile series are empty or of unequal length");
  }
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".svg") {
    render_svg(profile, path, title);
  } else if (ext == ".png") {
    render_png(profile, path, title);
  } else {
    throw Error(ErrorKind::IoFailure, "figure format must be .svg or .png, got '" + ext + "'");
  }
}

#define LUNARDEM_INSTANTIATE(S)                                                                                \
  template Tensor<S> predict_relative(const LunarDepthNet<S>&, const Tensor<S>&);                              \
  template RowMatrix<double> predict_relative(const LunarDepthNet<S>&, const RowMatrix<double>&);              \
  template MetricsReport evaluate_store(const Predictor<S>&, const TileStore&, Split, EvalMode, int);           \
  template MetricsReport evaluate_store(const LunarDepthNet<S>&, const TileStore&, Split, EvalMode, int);       \
  template Predictor<S> constant_predictor(double);

LUNARDEM_INSTANTIATE(float)
LUNARDEM_INSTANTIATE(double)

}  // namespace lunardem
