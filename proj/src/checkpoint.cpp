#include "csil/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace csil {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'S', 'M', 'X'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

class Cursor {
 public:
  explicit Cursor(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) throw CheckpointFormatError(std::string("truncated archive while reading ") + what);
  }
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json block_json(const ChannelBlock& b) {
  return {{"stage", b.stage},
          {"class_begin", b.class_begin},
          {"class_count", b.class_count},
          {"channel_begin", b.channel_begin},
          {"channel_count", b.channel_count}};
}

ChannelBlock block_from_json(const nlohmann::json& j) {
  return {j.at("stage").get<Index>(), j.at("class_begin").get<Index>(), j.at("class_count").get<Index>(),
          j.at("channel_begin").get<Index>(), j.at("channel_count").get<Index>()};
}

void add_params(MatrixArchive& ar, const std::string& prefix, const Model& model) {
  for (const Parameter& p : model.parameters()) ar.matrices.emplace_back(prefix + p.name, p.value);
}

Model params_from(const MatrixArchive& ar, const std::string& prefix, const ModelConfig& cfg,
                  const nlohmann::json& names) {
  std::vector<Parameter> params;
  for (const auto& n : names) {
    const std::string name = n.get<std::string>();
    params.push_back({name, ar.at(prefix + name)});
  }
  return Model::from_parameters(cfg, std::move(params));
}

nlohmann::json param_names(const Model& model) {
  nlohmann::json names = nlohmann::json::array();
  for (const Parameter& p : model.parameters()) names.push_back(p.name);
  return names;
}

}  // namespace

const Matrix& MatrixArchive::at(const std::string& name) const {
  for (const auto& [n, m] : matrices)
    if (n == name) return m;
  throw CheckpointFormatError("archive has no matrix named '" + name + "'");
}

bool MatrixArchive::contains(const std::string& name) const {
  for (const auto& entry : matrices)
    if (entry.first == name) return true;
  return false;
}

void write_archive(const MatrixArchive& archive, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["matrices"] = nlohmann::json::array();
  for (const auto& [name, m] : archive.matrices) header["matrices"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_archive: cannot open " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : archive.matrices) {
    const Matrix& m = entry.second;
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(m(r, c)));
  }
  if (!out) throw std::runtime_error("write_archive: write failed for " + path.string());
}

MatrixArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_archive: cannot open " + path.string());
  Cursor cur(std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {}));
  if (cur.text(4, "magic") != std::string(kMagic.data(), kMagic.size()))
    throw CheckpointFormatError("not a CSMX archive: " + path.string());
  const auto version = cur.le<std::uint32_t>("version");
  if (version != kVersion) throw CheckpointFormatError("unsupported CSMX version " + std::to_string(version));
  const auto header_bytes = cur.le<std::uint64_t>("header length");
  if (header_bytes > cur.remaining()) throw CheckpointFormatError("truncated archive while reading header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(cur.text(static_cast<std::size_t>(header_bytes), "header"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("malformed archive header: ") + e.what());
  }
  MatrixArchive ar;
  ar.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("matrices")) {
    const auto rows = entry.at("rows").get<Index>();
    const auto cols = entry.at("cols").get<Index>();
    if (rows < 0 || cols < 0) throw CheckpointFormatError("negative matrix dimensions in archive header");
    if (static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols) * 8 > cur.remaining())
      throw CheckpointFormatError("truncated archive while reading matrix '" + entry.at("name").get<std::string>() + "'");
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = std::bit_cast<double>(cur.le<std::uint64_t>("matrix data"));
    ar.matrices.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  if (cur.remaining() != 0)
    throw CheckpointFormatError(std::to_string(cur.remaining()) + " trailing bytes after the last matrix");
  return ar;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"extractor", to_string(cfg.extractor)},
          {"input", {cfg.input.height, cfg.input.width, cfg.input.channels}},
          {"mlp_hidden", cfg.mlp_hidden},
          {"mlp_features", cfg.mlp_features},
          {"cnn_channels1", cfg.cnn_channels1},
          {"cnn_channels2", cfg.cnn_channels2},
          {"cnn_kernel", cfg.cnn_kernel},
          {"head", to_string(cfg.head)},
          {"temperature", cfg.temperature}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.extractor = parse_extractor(j.at("extractor").get<std::string>());
  const auto& in = j.at("input");
  cfg.input = {in.at(0).get<Index>(), in.at(1).get<Index>(), in.at(2).get<Index>()};
  cfg.mlp_hidden = j.at("mlp_hidden").get<Index>();
  cfg.mlp_features = j.at("mlp_features").get<Index>();
  cfg.cnn_channels1 = j.at("cnn_channels1").get<Index>();
  cfg.cnn_channels2 = j.at("cnn_channels2").get<Index>();
  cfg.cnn_kernel = j.at("cnn_kernel").get<Index>();
  cfg.head = parse_head(j.at("head").get<std::string>());
  cfg.temperature = j.at("temperature").get<double>();
  return cfg;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  MatrixArchive ar;
  ar.meta["model"] = to_json(ckpt.model.config());
  ar.meta["parameters"] = param_names(ckpt.model);
  ar.meta["user"] = ckpt.meta;
  add_params(ar, "param/", ckpt.model);
  if (ckpt.context) {
    const StageContext& ctx = *ckpt.context;
    nlohmann::json c;
    c["stage_index"] = ctx.stage_index;
    c["old_class_count"] = ctx.old_class_count;
    c["use_kd"] = ctx.use_kd;
    c["use_ewc"] = ctx.use_ewc;
    c["channel_map"] = nlohmann::json::array();
    for (const ChannelBlock& b : ctx.channel_map) c["channel_map"].push_back(block_json(b));
    c["snapshot"] = ctx.snapshot.size();
    c["fisher"] = ctx.fisher.entries.size();
    c["masks"] = ctx.masks.size();
    c["previous"] = ctx.previous ? param_names(*ctx.previous) : nlohmann::json();
    ar.meta["context"] = c;
    for (std::size_t k = 0; k < ctx.snapshot.size(); ++k) ar.matrices.emplace_back("snapshot/" + std::to_string(k), ctx.snapshot[k]);
    for (std::size_t k = 0; k < ctx.fisher.entries.size(); ++k)
      ar.matrices.emplace_back("fisher/" + std::to_string(k), ctx.fisher.entries[k]);
    for (std::size_t k = 0; k < ctx.masks.size(); ++k) ar.matrices.emplace_back("mask/" + std::to_string(k), ctx.masks[k]);
    if (ctx.previous) add_params(ar, "previous/", *ctx.previous);
  }
  write_archive(ar, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const MatrixArchive ar = read_archive(path);
  try {
    Checkpoint ckpt;
    const ModelConfig cfg = model_config_from_json(ar.meta.at("model"));
    ckpt.model = params_from(ar, "param/", cfg, ar.meta.at("parameters"));
    ckpt.meta = ar.meta.value("user", nlohmann::json::object());
    if (ar.meta.contains("context")) {
      const nlohmann::json& c = ar.meta.at("context");
      StageContext ctx;
      ctx.stage_index = c.at("stage_index").get<Index>();
      ctx.old_class_count = c.at("old_class_count").get<Index>();
      ctx.use_kd = c.at("use_kd").get<bool>();
      ctx.use_ewc = c.at("use_ewc").get<bool>();
      for (const auto& b : c.at("channel_map")) ctx.channel_map.push_back(block_from_json(b));
      for (std::size_t k = 0; k < c.at("snapshot").get<std::size_t>(); ++k)
        ctx.snapshot.push_back(ar.at("snapshot/" + std::to_string(k)));
      for (std::size_t k = 0; k < c.at("fisher").get<std::size_t>(); ++k)
        ctx.fisher.entries.push_back(ar.at("fisher/" + std::to_string(k)));
      for (std::size_t k = 0; k < c.at("masks").get<std::size_t>(); ++k)
        ctx.masks.push_back(ar.at("mask/" + std::to_string(k)));
      if (!c.at("previous").is_null()) ctx.previous = params_from(ar, "previous/", cfg, c.at("previous"));
      ckpt.context = std::move(ctx);
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
}

void export_weights(const Model& model, const std::filesystem::path& path) { save_checkpoint({model, {}, {}}, path); }

Model import_weights(const std::filesystem::path& path) { return load_checkpoint(path).model; }

}  // namespace csil
