#include "revflow/checkpoint.h"

#include <cstring>
#include <map>

#include <json.hpp>

#include "revflow/errors.h"
#include "revflow/nft_io.h"

namespace revflow {

namespace {

constexpr char kMagic[4] = {'N', 'F', 'C', '1'};
constexpr const char* kFormatName = "revflow-checkpoint";
constexpr int kFormatVersion = 1;

using nlohmann::json;

json header_json(const CheckpointInfo& info) {
  const FlowConfig& a = info.architecture;
  return json{
      {"format", kFormatName},
      {"version", kFormatVersion},
      {"dtype", info.dtype == DType::F32 ? "f32" : "f64"},
      {"architecture",
       {{"input_shape", {a.channels, a.height, a.width}},
        {"scales", a.scales},
        {"steps", a.steps},
        {"coupling", std::string(to_string(a.coupling))},
        {"hidden", a.hidden}}},
      {"actnorm_initialized", info.actnorm_initialized},
      {"optimizer",
       {{"name", "adam"},
        {"lr", info.optimizer.lr},
        {"betas", {info.optimizer.beta1, info.optimizer.beta2}},
        {"eps", info.optimizer.eps},
        {"step", info.step}}},
      {"seed", info.seed},
      {"dataset", info.dataset},
  };
}

CheckpointInfo info_from_json(const json& j, std::uint64_t offset) {
  try {
    if (j.at("format").get<std::string>() != kFormatName) {
      throw FormatError("checkpoint header: unknown format", offset);
    }
    if (j.at("version").get<int>() != kFormatVersion) {
      throw FormatError("checkpoint header: unsupported version", offset);
    }
    CheckpointInfo info;
    const std::string dtype = j.at("dtype").get<std::string>();
    if (dtype == "f32") {
      info.dtype = DType::F32;
    } else if (dtype == "f64") {
      info.dtype = DType::F64;
    } else {
      throw FormatError("checkpoint header: unknown dtype '" + dtype + "'", offset);
    }
    const json& a = j.at("architecture");
    const auto shape = a.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw FormatError("checkpoint header: input_shape needs 3 dims", offset);
    info.architecture.channels = shape[0];
    info.architecture.height = shape[1];
    info.architecture.width = shape[2];
    info.architecture.scales = a.at("scales").get<std::size_t>();
    info.architecture.steps = a.at("steps").get<std::size_t>();
    info.architecture.coupling = parse_coupling(a.at("coupling").get<std::string>());
    info.architecture.hidden = a.at("hidden").get<std::size_t>();
    info.architecture.validate();
    info.actnorm_initialized = j.at("actnorm_initialized").get<bool>();
    const json& o = j.at("optimizer");
    info.optimizer.lr = o.at("lr").get<double>();
    const auto betas = o.at("betas").get<std::vector<double>>();
    if (betas.size() != 2) throw FormatError("checkpoint header: betas needs 2 values", offset);
    info.optimizer.beta1 = betas[0];
    info.optimizer.beta2 = betas[1];
    info.optimizer.eps = o.at("eps").get<double>();
    info.step = o.at("step").get<std::uint64_t>();
    info.seed = j.at("seed").get<std::uint64_t>();
    info.dataset = j.value("dataset", std::string());
    return info;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what(), offset);
  }
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::uint64_t pos = 0;

  void need(std::uint64_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    const std::uint32_t v = le::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    const std::uint64_t v = le::get_u64(bytes.data() + pos);
    pos += 8;
    return v;
  }
  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    need(n, what);
    auto s = bytes.subspan(pos, n);
    pos += n;
    return s;
  }
};

CheckpointInfo read_header(Reader& r) {
  r.need(4, "magic");
  if (std::memcmp(r.bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic (expected NFC1)", 0);
  }
  r.pos = 4;
  const std::uint64_t len = r.u64("header length");
  const std::uint64_t header_at = r.pos;
  const auto text = r.take(len, "header");
  json j = json::parse(text.begin(), text.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw FormatError("checkpoint header is not a JSON object", header_at);
  }
  return info_from_json(j, header_at);
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(FlowModel<T>& model, const CheckpointInfo& info) {
  CheckpointInfo stored = info;
  stored.dtype = dtype_of<T>();
  stored.architecture = model.config();
  stored.actnorm_initialized = model.initialized();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  const std::string header = header_json(stored).dump();
  le::put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());

  const auto params = model.named_parameters();
  le::put_u64(out, params.size());
  for (const auto& np : params) {
    le::put_u32(out, static_cast<std::uint32_t>(np.name.size()));
    out.insert(out.end(), np.name.begin(), np.name.end());
    const std::vector<std::uint8_t> blob = encode_nft(np.param->value);
    le::put_u64(out, blob.size());
    out.insert(out.end(), blob.begin(), blob.end());
  }
  return out;
}

CheckpointInfo decode_checkpoint_info(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  return read_header(r);
}

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  CheckpointInfo info = read_header(r);
  if (info.dtype != dtype_of<T>()) {
    throw FormatError(std::string("checkpoint holds ") + dtype_name(info.dtype) +
                          " tensors, requested " + dtype_name(dtype_of<T>()),
                      4);
  }
  Rng init_rng(info.seed);
  FlowModel<T> model(info.architecture, init_rng);

  std::map<std::string, Parameter<T>*> by_name;
  for (const auto& np : model.named_parameters()) by_name.emplace(np.name, np.param);

  const std::uint64_t count_at = r.pos;
  const std::uint64_t count = r.u64("entry count");
  if (count != by_name.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " entries, model expects " +
                          std::to_string(by_name.size()),
                      count_at);
  }
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::uint64_t entry_at = r.pos;
    const std::uint32_t name_len = r.u32("entry name length");
    const auto name_bytes = r.take(name_len, "entry name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second == nullptr) {
      throw FormatError("unexpected or duplicate checkpoint entry '" + name + "'", entry_at);
    }
    const std::uint64_t blob_len = r.u64("entry length");
    const std::uint64_t blob_at = r.pos;
    const auto blob = r.take(blob_len, "entry payload");
    Tensor<T> value = decode_nft<T>(blob, blob_at);
    Parameter<T>& p = *it->second;
    if (!(value.shape() == p.value.shape())) {
      throw FormatError("entry '" + name + "' has shape " + to_string(value.shape()) +
                            ", expected " + to_string(p.value.shape()),
                        blob_at);
    }
    p.value = std::move(value);
    p.touch();
    it->second = nullptr;
  }
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint entries", r.pos);

  for (std::size_t i : model.actnorm_stages()) {
    static_cast<ActNorm<T>*>(model.stages()[i].layer.get())
        ->set_initialized(info.actnorm_initialized);
  }
  return {std::move(info), std::move(model)};
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, FlowModel<T>& model,
                     const CheckpointInfo& info) {
  write_file_bytes(path, encode_checkpoint(model, info));
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return decode_checkpoint_info(read_file_bytes(path));
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

#define REVFLOW_INSTANTIATE_CHECKPOINT(T)                                                   \
  template std::vector<std::uint8_t> encode_checkpoint(FlowModel<T>&, const CheckpointInfo&); \
  template LoadedCheckpoint<T> decode_checkpoint(std::span<const std::uint8_t>);              \
  template void save_checkpoint(const std::filesystem::path&, FlowModel<T>&,                  \
                                const CheckpointInfo&);                                       \
  template LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path&);

REVFLOW_INSTANTIATE_CHECKPOINT(float)
REVFLOW_INSTANTIATE_CHECKPOINT(double)

}  // namespace revflow
