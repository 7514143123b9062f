#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "semitts/checkpoint.hpp"
#include "semitts/rng.hpp"
#include "semitts/tensor.hpp"
#include "semitts/wav.hpp"

namespace semitts {

struct FrameParams {
  std::size_t n_fft = 1024;
  std::size_t hop = 256;
  std::size_t win = 1024;
};

inline constexpr double kMagnitudeFloor = 1e-5;  // pre-log magnitude floor

enum class SpecKind { linear_log, mel_log };

// Log-domain spectrogram: frames × bins, row per frame.
struct Spectrogram {
  SpecKind kind = SpecKind::linear_log;
  Tensor values;
  std::size_t n_fft = 0, hop = 0, win = 0;
  int sample_rate = 0;
  double floor_mag = kMagnitudeFloor;

  std::size_t frames() const { return values.rows(); }
  std::size_t bins() const { return values.cols(); }
};

namespace dsp_detail {

using cpx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey; inverse includes the 1/n scale.
inline void fft(std::vector<cpx>& a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_pow2(n)) throw std::runtime_error("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    cpx wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cpx w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        cpx u = a[i + k];
        cpx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

// periodic Hann; satisfies the constant-overlap-add condition at hop = win/4
inline std::vector<double> hann(std::size_t win) {
  std::vector<double> w(win);
  for (std::size_t i = 0; i < win; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(win)));
  return w;
}

inline double reflect_sample(const std::vector<double>& x, long long i) {
  const long long n = static_cast<long long>(x.size());
  if (n == 1) return x[0];
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return x[static_cast<std::size_t>(i)];
}

}  // namespace dsp_detail

// Complex STFT frames laid out row-major, bins = n_fft/2 + 1.
struct ComplexFrames {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> v;

  std::complex<double>& at(std::size_t t, std::size_t k) { return v[t * bins + k]; }
  const std::complex<double>& at(std::size_t t, std::size_t k) const { return v[t * bins + k]; }
};

namespace dsp_detail {

// Analysis of an already-padded signal: frame t covers
// padded[t*hop, t*hop + win). No further padding is applied.
inline ComplexFrames analyze_padded(const std::vector<double>& padded, std::size_t frames,
                                    const FrameParams& fp, const std::vector<double>& window) {
  ComplexFrames out;
  out.frames = frames;
  out.bins = fp.n_fft / 2 + 1;
  out.v.assign(frames * out.bins, cpx(0.0, 0.0));
  std::vector<cpx> buf(fp.n_fft);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), cpx(0.0, 0.0));
    const std::size_t off = t * fp.hop;
    for (std::size_t i = 0; i < fp.win; ++i) buf[i] = cpx(padded[off + i] * window[i], 0.0);
    fft(buf, false);
    for (std::size_t k = 0; k < out.bins; ++k) out.v[t * out.bins + k] = buf[k];
  }
  return out;
}

// Least-squares synthesis back to the padded domain: windowed overlap-add
// normalized by the accumulated squared window.
inline std::vector<double> synthesize_padded(const ComplexFrames& cf, const FrameParams& fp,
                                             const std::vector<double>& window) {
  const std::size_t len = cf.frames == 0 ? 0 : (cf.frames - 1) * fp.hop + fp.win;
  std::vector<double> acc(len, 0.0), wsum(len, 0.0);
  std::vector<cpx> buf(fp.n_fft);
  for (std::size_t t = 0; t < cf.frames; ++t) {
    // rebuild the full conjugate-symmetric spectrum from the half representation
    for (std::size_t k = 0; k < cf.bins; ++k) buf[k] = cf.at(t, k);
    for (std::size_t k = 1; k + 1 < cf.bins; ++k) buf[fp.n_fft - k] = std::conj(cf.at(t, k));
    fft(buf, true);
    const std::size_t off = t * fp.hop;
    for (std::size_t i = 0; i < fp.win; ++i) {
      acc[off + i] += buf[i].real() * window[i];
      wsum[off + i] += window[i] * window[i];
    }
  }
  for (std::size_t i = 0; i < len; ++i) acc[i] /= std::max(wsum[i], 1e-12);
  return acc;
}

inline std::vector<double> reflect_pad_for_frames(const std::vector<double>& x, std::size_t frames,
                                                  const FrameParams& fp) {
  const std::size_t left = fp.win / 2;
  const std::size_t padded_len = frames == 0 ? 0 : (frames - 1) * fp.hop + fp.win;
  std::vector<double> padded(padded_len);
  for (std::size_t i = 0; i < padded_len; ++i)
    padded[i] = reflect_sample(x, static_cast<long long>(i) - static_cast<long long>(left));
  return padded;
}

}  // namespace dsp_detail

// Centered STFT with reflect padding; frame count = ceil(len / hop).
// An empty signal yields zero frames.
inline ComplexFrames stft(const std::vector<double>& x, const FrameParams& fp) {
  if (fp.hop == 0 || fp.win == 0) throw std::runtime_error("stft: hop and win must be positive");
  if (!(fp.hop <= fp.win && fp.win <= fp.n_fft))
    throw std::runtime_error("stft: need hop <= win <= n_fft");
  if (!dsp_detail::is_pow2(fp.n_fft)) throw std::runtime_error("stft: n_fft must be a power of two");
  const std::size_t frames = (x.size() + fp.hop - 1) / fp.hop;
  if (frames == 0) {
    ComplexFrames out;
    out.bins = fp.n_fft / 2 + 1;
    return out;
  }
  auto window = dsp_detail::hann(fp.win);
  auto padded = dsp_detail::reflect_pad_for_frames(x, frames, fp);
  return dsp_detail::analyze_padded(padded, frames, fp, window);
}

// Inverse STFT via window-sum-normalized overlap-add, cropped back to
// `length` samples.
inline std::vector<double> istft(const ComplexFrames& cf, const FrameParams& fp, std::size_t length) {
  if (cf.frames == 0) return {};
  auto window = dsp_detail::hann(fp.win);
  auto padded = dsp_detail::synthesize_padded(cf, fp, window);
  const std::size_t left = fp.win / 2;
  std::vector<double> out(length, 0.0);
  for (std::size_t i = 0; i < length && left + i < padded.size(); ++i) out[i] = padded[left + i];
  return out;
}

inline Tensor magnitudes(const ComplexFrames& cf) {
  Tensor m({cf.frames, cf.bins});
  for (std::size_t i = 0; i < cf.v.size(); ++i) (*m.data)[i] = std::abs(cf.v[i]);
  return m;
}

inline Spectrogram linear_log_spectrogram(const Waveform& w, const FrameParams& fp,
                                          double floor_mag = kMagnitudeFloor) {
  ComplexFrames cf = stft(w.samples, fp);
  Spectrogram s;
  s.kind = SpecKind::linear_log;
  s.values = magnitudes(cf);
  for (auto& v : *s.values.data) v = std::log(std::max(v, floor_mag));
  s.n_fft = fp.n_fft;
  s.hop = fp.hop;
  s.win = fp.win;
  s.sample_rate = w.sample_rate;
  s.floor_mag = floor_mag;
  if (cf.frames == 0) s.values.shape = {0, cf.bins};
  return s;
}

// Triangular mel filterbank on the HTK scale. The outermost triangle edges
// are pushed out by one FFT-bin spacing so bins sitting exactly on fmin or
// fmax keep nonzero weight.
struct MelFilterbank {
  Tensor weights;  // n_mels × (n_fft/2+1)
  double fmin = 50.0;
  double fmax = 8000.0;
  std::size_t n_fft = 1024;
  int sample_rate = 16000;

  std::size_t n_mels() const { return weights.rows(); }
  std::size_t bins() const { return weights.cols(); }
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

inline MelFilterbank make_mel_filterbank(std::size_t n_mels, std::size_t n_fft, int sample_rate,
                                         double fmin, double fmax) {
  if (n_mels == 0) throw std::runtime_error("mel: need at least one filter");
  if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0 + 1e-9))
    throw std::runtime_error("mel: need 0 <= fmin < fmax <= Nyquist");
  const std::size_t bins = n_fft / 2 + 1;
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);

  std::vector<double> edges(n_mels + 2);
  const double m_lo = hz_to_mel(fmin), m_hi = hz_to_mel(fmax);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  edges.front() -= bin_hz;  // keep edge bins inside some triangle
  edges.back() += bin_hz;

  MelFilterbank fb;
  fb.weights = Tensor({n_mels, bins});
  fb.fmin = fmin;
  fb.fmax = fmax;
  fb.n_fft = n_fft;
  fb.sample_rate = sample_rate;
  for (std::size_t i = 0; i < n_mels; ++i) {
    const double lo = edges[i], mid = edges[i + 1], hi = edges[i + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = bin_hz * static_cast<double>(k);
      double wgt = 0.0;
      if (f > lo && f < hi) wgt = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      fb.weights.at(i, k) = std::max(0.0, wgt);
    }
  }
  return fb;
}

inline Spectrogram mel_log_spectrogram(const Waveform& w, const MelFilterbank& fb,
                                       const FrameParams& fp, double floor_mag = kMagnitudeFloor) {
  if (fb.n_fft != fp.n_fft || fb.sample_rate != w.sample_rate)
    throw std::runtime_error("mel: filterbank geometry does not match signal framing");
  ComplexFrames cf = stft(w.samples, fp);
  Spectrogram s;
  s.kind = SpecKind::mel_log;
  s.values = Tensor({cf.frames, fb.n_mels()});
  for (std::size_t t = 0; t < cf.frames; ++t) {
    for (std::size_t i = 0; i < fb.n_mels(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cf.bins; ++k) acc += fb.weights.at(i, k) * std::abs(cf.at(t, k));
      s.values.at(t, i) = std::log(std::max(acc, floor_mag));
    }
  }
  s.n_fft = fp.n_fft;
  s.hop = fp.hop;
  s.win = fp.win;
  s.sample_rate = w.sample_rate;
  s.floor_mag = floor_mag;
  return s;
}

namespace dsp_detail {

// Cholesky factor of a symmetric positive-definite matrix (lower).
inline std::vector<double> cholesky(const std::vector<double>& a, std::size_t n) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      if (i == j) {
        if (s <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
        l[i * n + i] = std::sqrt(s);
      } else {
        l[i * n + j] = s / l[j * n + j];
      }
    }
  }
  return l;
}

// Solves A x = b with A = L L^T.
inline std::vector<double> chol_solve(const std::vector<double>& l, std::size_t n,
                                      std::vector<double> b) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k];
    b[i] = s / l[i * n + i];
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * b[k];
    b[ii] = s / l[ii * n + ii];
  }
  return b;
}

}  // namespace dsp_detail

// Minimum-norm nonnegative inversion of the mel projection: exponentiate,
// apply the clipped right pseudo-inverse of the filterbank, floor, re-log.
inline Spectrogram mel_to_linear(const Spectrogram& mel, const MelFilterbank& fb) {
  if (mel.kind != SpecKind::mel_log) throw std::runtime_error("mel_to_linear: input must be mel-log");
  if (mel.bins() != fb.n_mels() || mel.n_fft != fb.n_fft)
    throw std::runtime_error("mel_to_linear: filterbank geometry mismatch");
  const std::size_t n = fb.n_mels(), bins = fb.bins();

  // gram = M M^T, ridged just enough to stay positive definite when
  // adjacent filters overlap almost completely
  std::vector<double> gram(n * n, 0.0);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < bins; ++k) s += fb.weights.at(i, k) * fb.weights.at(j, k);
      gram[i * n + j] = gram[j * n + i] = s;
      if (i == j) max_diag = std::max(max_diag, s);
    }
  std::vector<double> l;
  double ridge = 1e-12 * max_diag;
  for (;; ridge *= 10.0) {
    auto g = gram;
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += ridge;
    try {
      l = dsp_detail::cholesky(g, n);
      break;
    } catch (const std::runtime_error&) {
      if (ridge > max_diag) throw;
    }
  }

  Spectrogram out;
  out.kind = SpecKind::linear_log;
  out.values = Tensor({mel.frames(), bins});
  std::vector<double> e(n);
  for (std::size_t t = 0; t < mel.frames(); ++t) {
    for (std::size_t i = 0; i < n; ++i) e[i] = std::exp(mel.values.at(t, i));
    auto y = dsp_detail::chol_solve(l, n, e);  // (M M^T)^{-1} e
    for (std::size_t k = 0; k < bins; ++k) {
      double x = 0.0;
      for (std::size_t i = 0; i < n; ++i) x += fb.weights.at(i, k) * y[i];
      out.values.at(t, k) = std::log(std::max(x, mel.floor_mag));
    }
  }
  out.n_fft = mel.n_fft;
  out.hop = mel.hop;
  out.win = mel.win;
  out.sample_rate = mel.sample_rate;
  out.floor_mag = mel.floor_mag;
  return out;
}

struct GriffinLimResult {
  Waveform wave;
  std::vector<double> convergence;  // per-iteration ||‖STFT(x)‖ − S||_F / ||S||_F
};

// Classic alternating-projection phase reconstruction. Iterations run in
// the padded frame domain so analysis and synthesis form an exact
// projection pair, which keeps the convergence sequence non-increasing.
inline GriffinLimResult griffin_lim(const Spectrogram& spec, std::size_t n_iters, std::uint64_t seed) {
  if (spec.kind != SpecKind::linear_log)
    throw std::runtime_error("griffin_lim: input must be linear-log (convert mel first)");
  if (n_iters == 0) throw std::runtime_error("griffin_lim: need at least one iteration");
  FrameParams fp{spec.n_fft, spec.hop, spec.win};
  const std::size_t frames = spec.frames(), bins = spec.bins();
  GriffinLimResult res;
  res.wave.sample_rate = spec.sample_rate;
  if (frames == 0) return res;

  // bins sitting at the log floor mark "nothing representable here", not
  // actual broadband energy at floor level — gate them to true silence
  const double gate = spec.floor_mag * (1.0 + 1e-9);
  Tensor mag({frames, bins});
  double snorm = 0.0;
  for (std::size_t i = 0; i < mag.numel(); ++i) {
    double m = std::exp((*spec.values.data)[i]);
    (*mag.data)[i] = m <= gate ? 0.0 : m;
    snorm += (*mag.data)[i] * (*mag.data)[i];
  }
  snorm = std::sqrt(snorm);

  auto window = dsp_detail::hann(fp.win);
  Rng rng(seed);
  ComplexFrames cf;
  cf.frames = frames;
  cf.bins = bins;
  cf.v.resize(frames * bins);
  for (std::size_t i = 0; i < cf.v.size(); ++i) {
    double ph = rng.uniform_angle();
    cf.v[i] = std::polar((*mag.data)[i], ph);
  }

  std::vector<double> x;
  for (std::size_t it = 0; it < n_iters; ++it) {
    x = dsp_detail::synthesize_padded(cf, fp, window);
    ComplexFrames re = dsp_detail::analyze_padded(x, frames, fp, window);
    double err = 0.0;
    for (std::size_t i = 0; i < re.v.size(); ++i) {
      double d = std::abs(re.v[i]) - (*mag.data)[i];
      err += d * d;
    }
    res.convergence.push_back(std::sqrt(err) / std::max(snorm, 1e-300));
    for (std::size_t i = 0; i < re.v.size(); ++i) {
      double a = std::abs(re.v[i]);
      cf.v[i] = a > 0.0 ? re.v[i] * ((*mag.data)[i] / a)
                        : std::complex<double>((*mag.data)[i], 0.0);
    }
  }
  x = dsp_detail::synthesize_padded(cf, fp, window);

  // crop the centering pad; nominal signal length is frames * hop
  const std::size_t left = fp.win / 2, length = frames * fp.hop;
  res.wave.samples.assign(length, 0.0);
  for (std::size_t i = 0; i < length && left + i < x.size(); ++i) res.wave.samples[i] = x[left + i];
  return res;
}

// Cache form: tensor-block payload with CRC plus a JSON sidecar of the
// framing metadata at <path>.json.
inline void save_spectrogram(const std::string& path, const Spectrogram& s) {
  std::string out;
  out.append("SEMTTSSP", 8);
  detail::put_u32(out, 1);
  detail::put_tensor_block(out, "values", s.values);
  detail::put_u32(out, detail::crc32(out));
  {
    std::string tmp = path + ".tmp";
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("spectrogram: cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.close();
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw std::runtime_error("spectrogram: cannot move " + tmp + " into place");
  }
  nlohmann::json meta{{"kind", s.kind == SpecKind::mel_log ? "mel-log" : "linear-log"},
                      {"n_fft", s.n_fft},
                      {"hop", s.hop},
                      {"win", s.win},
                      {"sample_rate", s.sample_rate},
                      {"floor", s.floor_mag},
                      {"frames", s.frames()},
                      {"bins", s.bins()}};
  std::ofstream mf(path + ".json", std::ios::trunc);
  if (!mf) throw std::runtime_error("spectrogram: cannot write " + path + ".json");
  mf << meta.dump(2) << "\n";
}

inline Spectrogram load_spectrogram(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("spectrogram: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();
  if (buf.size() < 16 || buf.compare(0, 8, "SEMTTSSP") != 0)
    throw std::runtime_error("spectrogram: bad magic in " + path);
  std::string body = buf.substr(0, buf.size() - 4);
  detail::ByteReader tail(buf);
  tail.pos = buf.size() - 4;
  if (detail::crc32(body) != tail.u32())
    throw std::runtime_error("spectrogram: checksum mismatch in " + path);
  detail::ByteReader r(body);
  r.pos = 8;
  if (r.u32() != 1) throw std::runtime_error("spectrogram: unsupported version in " + path);
  auto [name, values] = detail::read_tensor_block(r);

  std::ifstream mf(path + ".json");
  if (!mf) throw std::runtime_error("spectrogram: missing sidecar " + path + ".json");
  nlohmann::json meta = nlohmann::json::parse(mf);
  Spectrogram s;
  s.kind = meta.at("kind").get<std::string>() == "mel-log" ? SpecKind::mel_log : SpecKind::linear_log;
  s.values = std::move(values);
  s.n_fft = meta.at("n_fft").get<std::size_t>();
  s.hop = meta.at("hop").get<std::size_t>();
  s.win = meta.at("win").get<std::size_t>();
  s.sample_rate = meta.at("sample_rate").get<int>();
  s.floor_mag = meta.at("floor").get<double>();
  return s;
}

}  // namespace semitts
