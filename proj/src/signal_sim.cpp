#include "csil/signal_sim.hpp"

#include "csil/seed.hpp"

#include <unsupported/Eigen/FFT>

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace csil::sim {

namespace {

// Sum of random cosines over the bin axis, rescaled to peak |value| = peak.
Vector smooth_profile(Index bins, Index harmonics, double peak, std::mt19937_64& rng) {
  std::normal_distribution<double> amp(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  Vector v = Vector::Zero(bins);
  for (Index h = 1; h <= harmonics; ++h) {
    const double a = amp(rng), theta = angle(rng);
    for (Index k = 0; k < bins; ++k)
      v(k) += a * std::cos(2.0 * std::numbers::pi * static_cast<double>(h * k) / static_cast<double>(bins) + theta);
  }
  return v * (peak / v.cwiseAbs().maxCoeff());
}

void check_config(const SignalConfig& cfg) {
  if (cfg.shape.channels != 3) throw std::invalid_argument("SignalConfig: tensors must have 3 channels");
  if (cfg.bins() % cfg.samples_per_bit != 0)
    throw std::invalid_argument("SignalConfig: bin count must be a multiple of samples_per_bit");
}

// Pulse-position-modulated envelope: each bit puts a pulse in the first or
// second half of its slot.
std::vector<std::complex<double>> ppm_message(const SignalConfig& cfg, std::mt19937_64& rng) {
  const Index n = cfg.bins(), spb = cfg.samples_per_bit, half = spb / 2;
  std::vector<std::complex<double>> m(static_cast<std::size_t>(n), 0.0);
  std::bernoulli_distribution bit(0.5);
  for (Index b = 0; b < n / spb; ++b) {
    const Index start = b * spb + (bit(rng) ? 0 : half);
    for (Index t = start; t < start + half; ++t) m[static_cast<std::size_t>(t)] = 1.0;
  }
  return m;
}

std::vector<std::complex<double>> ortho_fft(const std::vector<std::complex<double>>& x) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> out;
  fft.fwd(out, x);
  const double s = 1.0 / std::sqrt(static_cast<double>(x.size()));
  for (auto& v : out) v *= s;
  return out;
}

std::vector<std::complex<double>> ortho_ifft(const std::vector<std::complex<double>>& x) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> out;
  fft.inv(out, x);
  const double s = std::sqrt(static_cast<double>(x.size()));
  for (auto& v : out) v *= s;
  return out;
}

}  // namespace

double carrier_magnitude(const SignalConfig& cfg) {
  check_config(cfg);
  // Half of every bit slot carries a unit pulse.
  return std::sqrt(0.5);
}

DeviceProfile make_profile(std::uint64_t seed, const SignalConfig& cfg) {
  check_config(cfg);
  std::mt19937_64 rng(derive_seed(seed, 0x5150));
  DeviceProfile p;
  p.seed = seed;
  p.gain = smooth_profile(cfg.bins(), cfg.harmonics, cfg.max_gain_offset, rng);
  p.phase = smooth_profile(cfg.bins(), cfg.harmonics, std::numbers::pi, rng);
  p.drift_scale = cfg.drift_scale;
  return p;
}

std::vector<std::complex<double>> signature_spectrum(const DeviceProfile& profile, double carrier) {
  std::vector<std::complex<double>> s(static_cast<std::size_t>(profile.gain.size()));
  for (Index k = 0; k < profile.gain.size(); ++k)
    s[static_cast<std::size_t>(k)] = std::polar(carrier * profile.gain(k), profile.phase(k));
  return s;
}

Vector SampleTensor::residual_channels() const {
  const Index bins = shape.height * shape.width;
  Vector out(2 * bins);
  for (Index k = 0; k < bins; ++k) {
    out(k) = data(k * shape.channels + 0);
    out(bins + k) = data(k * shape.channels + 1);
  }
  return out;
}

SampleTensor synthesize_sample(const DeviceProfile& profile, double snr_db, std::uint64_t message_seed,
                               const SignalConfig& cfg) {
  check_config(cfg);
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
    throw std::invalid_argument("synthesize_sample: snr_db must be finite or +inf");
  if (profile.gain.size() != cfg.bins()) throw ShapeError("synthesize_sample: profile bin count mismatch");

  std::mt19937_64 rng(derive_seed(message_seed, profile.seed, 0xa11ce));
  const std::size_t n = static_cast<std::size_t>(cfg.bins());
  const double carrier = carrier_magnitude(cfg);

  const auto message = ppm_message(cfg, rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double drift = 1.0 + profile.drift_scale * gauss(rng);
  auto pseudo_noise = signature_spectrum(profile, carrier);
  for (auto& v : pseudo_noise) v *= drift;
  const auto device_residual = ortho_ifft(pseudo_noise);

  // Complex AWGN relative to message power.
  const double noise_power = std::isinf(snr_db) ? 0.0 : carrier * carrier / std::pow(10.0, snr_db / 10.0);
  const double sigma = std::sqrt(noise_power / 2.0);
  std::vector<std::complex<double>> received(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::complex<double> noise = sigma > 0.0 ? std::complex<double>(sigma * gauss(rng), sigma * gauss(rng))
                                                   : std::complex<double>(0.0, 0.0);
    received[t] = message[t] + device_residual[t] + noise;
  }

  // Residual spectrum: received spectrum minus the reconstructed ideal message spectrum.
  const auto rx_spec = ortho_fft(received);
  const auto msg_spec = ortho_fft(message);

  SampleTensor s;
  s.shape = cfg.shape;
  s.data.resize(cfg.shape.size());
  for (std::size_t k = 0; k < n; ++k) {
    const std::complex<double> residual = rx_spec[k] - msg_spec[k];
    const Index base = static_cast<Index>(k) * cfg.shape.channels;
    s.data(base + 0) = std::abs(residual);
    s.data(base + 1) = std::arg(residual);
    s.data(base + 2) = std::abs(received[k]);
  }
  return s;
}

Vector signature_layout(const DeviceProfile& profile, const SignalConfig& cfg) {
  const auto sig = signature_spectrum(profile, carrier_magnitude(cfg));
  const Index bins = cfg.bins();
  Vector out(2 * bins);
  for (Index k = 0; k < bins; ++k) {
    out(k) = std::abs(sig[static_cast<std::size_t>(k)]);
    out(bins + k) = std::arg(sig[static_cast<std::size_t>(k)]);
  }
  return out;
}

bool Dataset::operator==(const Dataset& other) const {
  return shape == other.shape && device_count == other.device_count && labels == other.labels &&
         samples.rows() == other.samples.rows() && samples.cols() == other.samples.cols() &&
         std::equal(samples.data(), samples.data() + samples.size(), other.samples.data(),
                    [](float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); });
}

Dataset make_dataset(Index n_devices, Index samples_per_device, double snr_db, std::uint64_t seed,
                     const SignalConfig& cfg) {
  if (n_devices < 1 || samples_per_device < 1)
    throw std::invalid_argument("make_dataset: need at least one device and one sample per device");
  Dataset ds;
  ds.shape = cfg.shape;
  ds.device_count = n_devices;
  ds.samples.resize(cfg.shape.size(), n_devices * samples_per_device);
  ds.labels.reserve(static_cast<std::size_t>(n_devices * samples_per_device));
  for (Index d = 0; d < n_devices; ++d) {
    const DeviceProfile profile = make_profile(derive_seed(seed, 0xde71ce, static_cast<std::uint64_t>(d)), cfg);
    for (Index i = 0; i < samples_per_device; ++i) {
      const auto msg_seed = derive_seed(seed, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i));
      const SampleTensor s = synthesize_sample(profile, snr_db, msg_seed, cfg);
      ds.samples.col(d * samples_per_device + i) = s.data.cast<float>();
      ds.labels.push_back(static_cast<std::int32_t>(d));
    }
  }
  return ds;
}

Split stratified_split(const Dataset& ds, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("stratified_split: train_fraction must lie in (0, 1)");
  std::vector<std::vector<Index>> per_device(static_cast<std::size_t>(ds.device_count));
  for (Index i = 0; i < ds.size(); ++i) per_device.at(static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])).push_back(i);
  Split split;
  for (const auto& idx : per_device) {
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.insert(split.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  return split;
}

ChannelStats channel_stats(const Dataset& ds, const std::vector<Index>& indices) {
  const Index c = ds.shape.channels, pixels = ds.shape.height * ds.shape.width;
  if (indices.empty()) throw std::invalid_argument("channel_stats: no samples");
  Vector sum = Vector::Zero(c), sq = Vector::Zero(c);
  for (Index i : indices)
    for (Index p = 0; p < pixels; ++p)
      for (Index ch = 0; ch < c; ++ch) {
        const double v = ds.samples(p * c + ch, i);
        sum(ch) += v;
        sq(ch) += v * v;
      }
  const double n = static_cast<double>(indices.size() * static_cast<std::size_t>(pixels));
  ChannelStats st;
  st.mean = sum / n;
  st.stddev = (sq / n - st.mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  for (Index ch = 0; ch < c; ++ch)
    if (!(st.stddev(ch) > 0.0)) st.stddev(ch) = 1.0;
  return st;
}

Matrix standardized(const Dataset& ds, const std::vector<Index>& indices, const ChannelStats& stats) {
  const Index c = ds.shape.channels;
  Matrix out(ds.samples.rows(), static_cast<Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const Index col = indices[j];
    for (Index r = 0; r < out.rows(); ++r) {
      const Index ch = r % c;
      out(r, static_cast<Index>(j)) = (static_cast<double>(ds.samples(r, col)) - stats.mean(ch)) / stats.stddev(ch);
    }
  }
  return out;
}

// -- "CSIL" container -------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'C', 'S', 'I', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

class Reader {
 public:
  explicit Reader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t u32(const char* what) {
    if (pos_ + 4 > bytes_.size()) throw DatasetFormatError(std::string("truncated file while reading ") + what);
    const std::uint32_t v = static_cast<std::uint32_t>(bytes_[pos_]) | (static_cast<std::uint32_t>(bytes_[pos_ + 1]) << 8) |
                            (static_cast<std::uint32_t>(bytes_[pos_ + 2]) << 16) |
                            (static_cast<std::uint32_t>(bytes_[pos_ + 3]) << 24);
    pos_ += 4;
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  if (static_cast<Index>(ds.labels.size()) != ds.size() || ds.samples.rows() != ds.shape.size())
    throw ShapeError("save_dataset: inconsistent dataset");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path.string());
  out.write(kMagic.data(), 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(ds.device_count));
  put_u32(out, static_cast<std::uint32_t>(ds.size()));
  put_u32(out, 3);
  put_u32(out, static_cast<std::uint32_t>(ds.shape.height));
  put_u32(out, static_cast<std::uint32_t>(ds.shape.width));
  put_u32(out, static_cast<std::uint32_t>(ds.shape.channels));
  for (Index j = 0; j < ds.samples.cols(); ++j)
    for (Index r = 0; r < ds.samples.rows(); ++r) put_u32(out, std::bit_cast<std::uint32_t>(ds.samples(r, j)));
  for (std::int32_t l : ds.labels) put_u32(out, std::bit_cast<std::uint32_t>(l));
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin(),
                                      [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; }))
    throw DatasetFormatError("load_dataset: bad magic in " + path.string());
  Reader r(std::vector<unsigned char>(bytes.begin() + 4, bytes.end()));
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) throw DatasetFormatError("load_dataset: unsupported version " + std::to_string(version));
  const std::uint32_t devices = r.u32("device count");
  const std::uint32_t count = r.u32("sample count");
  const std::uint32_t rank = r.u32("rank");
  if (rank != 3) throw DatasetFormatError("load_dataset: expected rank 3, got " + std::to_string(rank));
  ImageShape shape;
  shape.height = r.u32("height");
  shape.width = r.u32("width");
  shape.channels = r.u32("channels");
  if (shape.size() <= 0) throw DatasetFormatError("load_dataset: empty tensor dims");
  const std::size_t need = (static_cast<std::size_t>(count) * static_cast<std::size_t>(shape.size()) + count) * 4;
  if (r.remaining() < need) throw DatasetFormatError("load_dataset: truncated payload in " + path.string());
  if (r.remaining() > need) throw DatasetFormatError("load_dataset: trailing bytes in " + path.string());

  Dataset ds;
  ds.shape = shape;
  ds.device_count = devices;
  ds.samples.resize(shape.size(), count);
  for (Index j = 0; j < ds.samples.cols(); ++j)
    for (Index row = 0; row < ds.samples.rows(); ++row) ds.samples(row, j) = std::bit_cast<float>(r.u32("data"));
  ds.labels.resize(count);
  for (auto& l : ds.labels) {
    l = std::bit_cast<std::int32_t>(r.u32("labels"));
    if (l < 0 || static_cast<std::uint32_t>(l) >= devices)
      throw DatasetFormatError("load_dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(devices) + ")");
  }
  return ds;
}

void write_manifest(const Dataset& ds, const std::filesystem::path& path) {
  std::vector<Index> counts(static_cast<std::size_t>(ds.device_count), 0);
  for (std::int32_t l : ds.labels) ++counts.at(static_cast<std::size_t>(l));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path.string());
  out << "device_id,sample_count\n";
  for (std::size_t d = 0; d < counts.size(); ++d) out << d << ',' << counts[d] << '\n';
}

}  // namespace csil::sim
