#pragma once

// Synthetic transmitter data. Each device adds a fixed pseudo-noise spectrum
// to whatever message it sends, so the received spectrum minus the ideal
// message spectrum leaves the device signature plus channel noise regardless
// of message content. Samples are rendered as 32x32x3 tensors: magnitude
// residual, phase residual, and the baseband envelope.

#include "csil/tensor.hpp"

#include <complex>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace csil::sim {

struct SignalConfig {
  ImageShape shape{32, 32, 3};   // height * width must equal the bin count
  Index harmonics = 64;          // smoothness of the signature profiles
  double max_gain_offset = 0.1;  // fraction of carrier magnitude
  double drift_scale = 0.05;     // per-sample multiplicative jitter of the signature
  Index samples_per_bit = 8;

  Index bins() const { return shape.height * shape.width; }
};

struct DeviceProfile {
  std::uint64_t seed = 0;
  Vector gain;   // per-bin gain offsets, |gain| <= max_gain_offset
  Vector phase;  // per-bin phase offsets, radians
  double drift_scale = 0.0;
};

/// Noise-free residual spectrum of a device: carrier * gain * exp(i*phase).
std::vector<std::complex<double>> signature_spectrum(const DeviceProfile& profile, double carrier_magnitude);

struct SampleTensor {
  ImageShape shape;
  Vector data;  // row-major height x width x channels
  std::int32_t label = 0;

  double at(Index h, Index w, Index c) const { return data(shape.offset(h, w, c)); }
  /// Channels 0 and 1 concatenated (magnitude residual, then phase residual).
  Vector residual_channels() const;
};

DeviceProfile make_profile(std::uint64_t seed, const SignalConfig& cfg = {});

/// RMS magnitude of the baseband message, used as the carrier reference.
double carrier_magnitude(const SignalConfig& cfg = {});

/// One received message. snr_db may be +infinity (noise-free).
SampleTensor synthesize_sample(const DeviceProfile& profile, double snr_db, std::uint64_t message_seed,
                               const SignalConfig& cfg = {});

/// Residual channels with no noise and no drift: the device's pure signature layout.
Vector signature_layout(const DeviceProfile& profile, const SignalConfig& cfg = {});

struct Dataset {
  ImageShape shape;
  Index device_count = 0;
  Eigen::MatrixXf samples;  // one flattened tensor per column
  std::vector<std::int32_t> labels;

  Index size() const { return samples.cols(); }
  bool operator==(const Dataset& other) const;
};

struct Split {
  std::vector<Index> train;
  std::vector<Index> val;
};

/// Device-major dataset; deterministic under (seed, cfg).
Dataset make_dataset(Index n_devices, Index samples_per_device, double snr_db, std::uint64_t seed,
                     const SignalConfig& cfg = {});

/// Per device, the first round(train_fraction * n) samples in file order go to
/// train, the rest to validation.
Split stratified_split(const Dataset& ds, double train_fraction = 0.6);

struct ChannelStats {
  Vector mean;
  Vector stddev;
};

ChannelStats channel_stats(const Dataset& ds, const std::vector<Index>& indices);
/// Selected columns, standardized per channel, in double precision.
Matrix standardized(const Dataset& ds, const std::vector<Index>& indices, const ChannelStats& stats);

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "CSIL" container, version 1, all fields little-endian:
///   char[4] magic "CSIL"; u32 version; u32 device_count; u32 sample_count;
///   u32 rank; u32 dims[rank] (height, width, channels);
///   f32 data[sample_count * prod(dims)] (row-major per sample);
///   i32 labels[sample_count].
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// CSV manifest: header "device_id,sample_count", one line per device.
void write_manifest(const Dataset& ds, const std::filesystem::path& path);

}  // namespace csil::sim
