#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semitts/dsp.hpp"
#include "semitts/manifest.hpp"
#include "semitts/model.hpp"
#include "semitts/wav.hpp"
#include "semitts/wordvec.hpp"

namespace semitts {

// Orthonormal DCT-II along the mel axis, coefficients 1..n_coeffs kept
// (c0 carries overall energy and is excluded so gain differences cancel).
inline Tensor mel_cepstra(const Spectrogram& mel, std::size_t n_coeffs = 13) {
  if (mel.kind != SpecKind::mel_log) throw std::runtime_error("mel_cepstra: input must be mel-log");
  const std::size_t M = mel.bins(), T = mel.frames();
  if (n_coeffs >= M)
    throw std::runtime_error("mel_cepstra: n_coeffs must be smaller than the mel bin count");
  Tensor out({T, n_coeffs});
  const double pi = 3.14159265358979323846;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 1; k <= n_coeffs; ++k) {
      double acc = 0.0;
      for (std::size_t m = 0; m < M; ++m)
        acc += mel.values.at(t, m) * std::cos(pi * k * (2.0 * m + 1.0) / (2.0 * M));
      out.at(t, k - 1) = std::sqrt(2.0 / M) * acc;
    }
  return out;
}

// Classic DTW over Euclidean frame distances with steps down/right/diagonal.
inline std::vector<std::pair<std::size_t, std::size_t>> dtw_align(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = b.rows();
  if (n == 0 || m == 0) throw std::runtime_error("dtw: empty input");
  if (a.cols() != b.cols()) throw std::runtime_error("dtw: feature widths disagree");
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.cols(); ++d) {
      double diff = a.at(i, d) - b.at(j, d);
      s += diff * diff;
    }
    return std::sqrt(s);
  };
  std::vector<double> dp(n * m);
  std::vector<unsigned char> from(n * m);  // 0 diag, 1 up (i-1), 2 left (j-1)
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double d = dist(i, j);
      if (i == 0 && j == 0) {
        dp[0] = d;
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      unsigned char src = 0;
      if (i > 0 && j > 0 && dp[(i - 1) * m + (j - 1)] < best) {
        best = dp[(i - 1) * m + (j - 1)];
        src = 0;
      }
      if (i > 0 && dp[(i - 1) * m + j] < best) {
        best = dp[(i - 1) * m + j];
        src = 1;
      }
      if (j > 0 && dp[i * m + (j - 1)] < best) {
        best = dp[i * m + (j - 1)];
        src = 2;
      }
      dp[i * m + j] = best + d;
      from[i * m + j] = src;
    }
  std::vector<std::pair<std::size_t, std::size_t>> path;
  std::size_t i = n - 1, j = m - 1;
  path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    unsigned char src = from[i * m + j];
    if (i == 0) src = 2;
    else if (j == 0) src = 1;
    if (src == 0) { --i; --j; }
    else if (src == 1) { --i; }
    else { --j; }
    path.emplace_back(i, j);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

struct MCDResult {
  std::string id;
  double mcd_db = 0.0;
  std::size_t frames = 0;    // reference frame count
  std::size_t path_len = 0;  // aligned pair count
};

// Mean over DTW-aligned cepstral pairs of (10/ln10)·sqrt(2·Σ_d (c_d-c'_d)²).
inline MCDResult mcd_from_cepstra(const Tensor& ca, const Tensor& cb) {
  auto path = dtw_align(ca, cb);
  double acc = 0.0;
  for (const auto& [i, j] : path) {
    double s = 0.0;
    for (std::size_t d = 0; d < ca.cols(); ++d) {
      double diff = ca.at(i, d) - cb.at(j, d);
      s += diff * diff;
    }
    acc += (10.0 / std::log(10.0)) * std::sqrt(2.0 * s);
  }
  MCDResult r;
  r.mcd_db = acc / static_cast<double>(path.size());
  r.frames = ca.rows();
  r.path_len = path.size();
  return r;
}

inline MCDResult mcd(const Waveform& reference, const Waveform& synthesis, const MelFilterbank& fb,
                     const FrameParams& fp, std::size_t n_coeffs = 13,
                     double floor_mag = kMagnitudeFloor) {
  if (reference.sample_rate != synthesis.sample_rate)
    throw std::runtime_error("mcd: sample rates disagree");
  Tensor ca = mel_cepstra(mel_log_spectrogram(reference, fb, fp, floor_mag), n_coeffs);
  Tensor cb = mel_cepstra(mel_log_spectrogram(synthesis, fb, fp, floor_mag), n_coeffs);
  return mcd_from_cepstra(ca, cb);
}

struct EvalRow {
  MCDResult result;
  std::string error;  // empty on success
};

struct EvalReport {
  std::vector<EvalRow> rows;  // sorted by id
  double mean_mcd = std::numeric_limits<double>::quiet_NaN();
  double median_mcd = std::numeric_limits<double>::quiet_NaN();
  std::string config_hash;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct EvalContext {
  ModelConfig model;
  ParameterSet* params = nullptr;
  Lexicon lexicon;
  TokenMode token_mode = TokenMode::phoneme;
  const WordVectorTable* wordvecs = nullptr;  // required when conditioning is on
  MelFilterbank fb;
  FrameParams fp;
  double floor_mag = kMagnitudeFloor;
  std::size_t n_coeffs = 13;
  std::size_t griffin_lim_iters = 60;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// full audio path for one utterance: text → mel → linear → Griffin-Lim
inline Waveform synthesize_waveform(EvalContext& ctx, const std::string& text, std::uint64_t seed) {
  TokenSequence seq = tokenize(normalize_text(text), ctx.lexicon, ctx.token_mode);
  Tensor wv = word_vector_rows(seq, ctx.wordvecs, ctx.model.conditioning.wordvec_dim);
  SynthesisResult syn = synthesize_mel(*ctx.params, ctx.model, seq, wv, seed);

  Spectrogram mel;
  mel.kind = SpecKind::mel_log;
  mel.values = syn.mel;
  mel.n_fft = ctx.fp.n_fft;
  mel.hop = ctx.fp.hop;
  mel.win = ctx.fp.win;
  mel.sample_rate = ctx.fb.sample_rate;
  mel.floor_mag = ctx.floor_mag;
  Spectrogram linear = mel_to_linear(mel, ctx.fb);
  return griffin_lim(linear, ctx.griffin_lim_iters, seed).wave;
}

inline EvalReport evaluate_set(EvalContext& ctx, const Manifest& manifest) {
  EvalReport report;
  report.config_hash = ctx.config_hash.empty() ? model_config_hash(ctx.model) : ctx.config_hash;
  for (const auto& entry : manifest.entries) {
    EvalRow row;
    row.result.id = entry.id;
    try {
      if (!entry.text) throw std::runtime_error("no transcript for evaluation");
      Waveform ref = load_wav(entry.audio_path);
      Waveform syn = synthesize_waveform(ctx, *entry.text, derive_seed(ctx.seed, entry.id));
      MCDResult r = mcd(ref, syn, ctx.fb, ctx.fp, ctx.n_coeffs, ctx.floor_mag);
      r.id = entry.id;
      row.result = r;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const EvalRow& a, const EvalRow& b) { return a.result.id < b.result.id; });
  std::vector<double> ok;
  for (const auto& r : report.rows)
    if (r.error.empty()) ok.push_back(r.result.mcd_db);
  if (!ok.empty()) {
    double s = 0.0;
    for (double v : ok) s += v;
    report.mean_mcd = s / ok.size();
    report.median_mcd = median_of(ok);
  }
  return report;
}

inline std::string eval_report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "# config_hash=" << report.config_hash << "\n";
  out << "id,mcd_db,frames,path_len,error\n";
  char buf[64];
  for (const auto& r : report.rows) {
    out << r.result.id << ",";
    if (r.error.empty()) {
      std::snprintf(buf, sizeof buf, "%.6f", r.result.mcd_db);
      out << buf << "," << r.result.frames << "," << r.result.path_len << ",";
    } else {
      std::string msg = r.error;
      for (char& c : msg)
        if (c == ',' || c == '\n') c = ';';
      out << ",0,0," << msg;
    }
    out << "\n";
  }
  return out.str();
}

// ---- sweep plot ----------------------------------------------------------

struct SweepRow {
  std::string variant;
  double paired_minutes = 0.0;
  std::uint64_t seed = 0;
  double mcd = 0.0;
};

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  std::vector<SweepRow> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        parts.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    parts.push_back(cur);
    return parts;
  };
  int iv = -1, im = -1, is = -1, ic = -1;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto parts = split(line);
    if (header.empty()) {
      header = parts;
      for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "variant") iv = static_cast<int>(i);
        if (header[i] == "paired_minutes") im = static_cast<int>(i);
        if (header[i] == "seed") is = static_cast<int>(i);
        if (header[i] == "mcd") ic = static_cast<int>(i);
      }
      for (auto [idx, name] : {std::pair<int, const char*>{iv, "variant"},
                               {im, "paired_minutes"},
                               {is, "seed"},
                               {ic, "mcd"}})
        if (idx < 0) throw std::runtime_error(std::string("sweep csv: missing column ") + name);
      continue;
    }
    if (parts.size() < header.size()) throw std::runtime_error("sweep csv: short row: " + line);
    SweepRow r;
    r.variant = parts[iv];
    r.paired_minutes = std::stod(parts[im]);
    r.seed = std::stoull(parts[is]);
    r.mcd = std::stod(parts[ic]);
    rows.push_back(std::move(r));
  }
  if (header.empty()) throw std::runtime_error("sweep csv: missing column variant");
  return rows;
}

// One median-over-seeds line per variant of MCD vs paired minutes.
inline std::string emit_plot(const std::string& sweep_csv_text) {
  auto rows = parse_sweep_csv(sweep_csv_text);
  // variant -> minutes -> seed mcds
  std::map<std::string, std::map<double, std::vector<double>>> grouped;
  for (const auto& r : rows) grouped[r.variant][r.paired_minutes].push_back(r.mcd);

  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (auto& [variant, by_min] : grouped) {
    std::vector<std::pair<double, double>> pts;
    for (auto& [minutes, mcds] : by_min) {
      double med = median_of(mcds);
      pts.emplace_back(minutes, med);
      xmin = std::min(xmin, minutes);
      xmax = std::max(xmax, minutes);
      ymin = std::min(ymin, med);
      ymax = std::max(ymax, med);
    }
    series.emplace_back(variant, std::move(pts));
  }
  if (series.empty()) throw std::runtime_error("plot: no data rows");
  if (xmax - xmin < 1e-12) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 1.0;
    ymax += 1.0;
  }
  ymin -= 0.05 * (ymax - ymin);
  ymax += 0.05 * (ymax - ymin);

  const double W = 640, H = 420, ml = 70, mr = 170, mt = 30, mb = 50;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };
  auto fmt = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W
      << "\" height=\"" << H << "\">\n";
  svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(H - mb) << "\" x2=\"" << fmt(W - mr)
      << "\" y2=\"" << fmt(H - mb) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(mt) << "\" x2=\"" << fmt(ml) << "\" y2=\""
      << fmt(H - mb) << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << fmt((ml + W - mr) / 2) << "\" y=\"" << fmt(H - 12)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">paired minutes"
         "</text>\n";
  svg << "<text x=\"16\" y=\"" << fmt((mt + H - mb) / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 "
      << fmt((mt + H - mb) / 2) << ")\">median MCD (dB)</text>\n";
  for (int i = 0; i <= 4; ++i) {
    double y = ymin + (ymax - ymin) * i / 4.0;
    svg << "<line x1=\"" << fmt(ml - 4) << "\" y1=\"" << fmt(py(y)) << "\" x2=\"" << fmt(ml)
        << "\" y2=\"" << fmt(py(y)) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fmt(ml - 8) << "\" y=\"" << fmt(py(y) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(y)
        << "</text>\n";
  }
  std::vector<double> xticks;
  for (const auto& [variant, pts] : series)
    for (const auto& [x, y] : pts) xticks.push_back(x);
  std::sort(xticks.begin(), xticks.end());
  xticks.erase(std::unique(xticks.begin(), xticks.end()), xticks.end());
  for (double x : xticks) {
    svg << "<line x1=\"" << fmt(px(x)) << "\" y1=\"" << fmt(H - mb) << "\" x2=\"" << fmt(px(x))
        << "\" y2=\"" << fmt(H - mb + 4) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fmt(px(x)) << "\" y=\"" << fmt(H - mb + 18)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(x)
        << "</text>\n";
  }
  std::size_t si = 0;
  for (const auto& [variant, pts] : series) {
    const char* color = palette[si % 6];
    if (pts.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (i) svg << " ";
        svg << fmt(px(pts[i].first)) << "," << fmt(py(pts[i].second));
      }
      svg << "\"/>\n";
    }
    for (const auto& [x, y] : pts)
      svg << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\"3\" fill=\""
          << color << "\"/>\n";
    double ly = mt + 18.0 * static_cast<double>(si);
    svg << "<line x1=\"" << fmt(W - mr + 14) << "\" y1=\"" << fmt(ly) << "\" x2=\""
        << fmt(W - mr + 38) << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << fmt(W - mr + 44) << "\" y=\"" << fmt(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << variant << "</text>\n";
    ++si;
  }
  svg << "</svg>\n";
  return svg.str();
}

// Grayscale heatmap of decoder attention: rows = decoder steps, columns =
// encoder positions, darker = more weight.
inline std::string alignment_svg(const Tensor& alignment) {
  if (alignment.shape.size() != 2 || alignment.shape[0] == 0 || alignment.shape[1] == 0)
    throw std::runtime_error("alignment plot: need a non-empty steps x positions matrix");
  std::size_t steps = alignment.shape[0], positions = alignment.shape[1];
  double hi = 0.0;
  for (double v : alignment.values) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;

  const double cell = std::max(2.0, std::min(12.0, 560.0 / static_cast<double>(steps)));
  const double ml = 60, mt = 24;
  const double W = ml + cell * static_cast<double>(steps) + 20;
  const double H = mt + cell * static_cast<double>(positions) + 44;
  auto fmt = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.1f", v);
    return std::string(b);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << fmt(W)
      << "\" height=\"" << fmt(H) << "\">\n";
  svg << "<rect width=\"" << fmt(W) << "\" height=\"" << fmt(H) << "\" fill=\"white\"/>\n";
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t p = 0; p < positions; ++p) {
      int shade = 255 - static_cast<int>(std::lround(255.0 * alignment.at(s, p) / hi));
      shade = std::min(255, std::max(0, shade));
      if (shade == 255) continue;  // keep the white background
      svg << "<rect x=\"" << fmt(ml + cell * static_cast<double>(s)) << "\" y=\""
          << fmt(mt + cell * static_cast<double>(positions - 1 - p)) << "\" width=\"" << fmt(cell)
          << "\" height=\"" << fmt(cell) << "\" fill=\"rgb(" << shade << "," << shade << ","
          << shade << ")\"/>\n";
    }
  }
  svg << "<text x=\"" << fmt(ml + cell * static_cast<double>(steps) / 2) << "\" y=\"" << fmt(H - 14)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">decoder step"
         "</text>\n";
  svg << "<text x=\"16\" y=\"" << fmt(mt + cell * static_cast<double>(positions) / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
      << fmt(mt + cell * static_cast<double>(positions) / 2) << ")\">encoder position</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace semitts
