#include "vqc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace vqc {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using ad::Array;

constexpr const char* kFormat = "vqc-checkpoint";
constexpr const char* kManifest = "manifest.json";
constexpr const char* kData = "params.bin";

struct TensorRef {
  std::string name;
  Array* array;
};

/// Every tensor of a checkpoint in storage order.
std::vector<TensorRef> tensors(Checkpoint& c) {
  std::vector<TensorRef> out;
  visit(c.params, [&](const std::string& name, Array& a) { out.push_back({name, &a}); });
  out.push_back({"codebook.ris", &c.codebooks.ris.entries});
  out.push_back({"codebook.bs", &c.codebooks.bs.entries});
  return out;
}

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

[[noreturn]] void fail(const std::filesystem::path& dir, const std::string& what) {
  throw InvalidArgument("checkpoint '" + dir.string() + "': " + what);
}

std::string read_file(const std::filesystem::path& dir, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(dir, "cannot open " + file.filename().string());
  std::ostringstream s;
  s << in.rdbuf();
  if (in.bad()) fail(dir, "cannot read " + file.filename().string());
  return s.str();
}

void write_file(const std::filesystem::path& file, const std::string& bytes) {
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidArgument("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InvalidArgument("cannot write '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, file);
}

/// Shapes a checkpoint for `config` must have, in storage order.
Checkpoint empty_for(const RunConfig& config) {
  Checkpoint c;
  c.config = config;
  c.params = zero_parameters(config.model);
  c.codebooks.ris.entries = Array(2 * config.model.N, config.model.V);
  c.codebooks.bs.entries = Array(2 * config.model.M, config.model.B);
  return c;
}

}  // namespace

Checkpoint make_checkpoint(const RunConfig& config, const TrainState& state) {
  Checkpoint c;
  c.kind = config.model.codebook_free ? "codebook-free" : "vqc";
  c.config = config;
  c.params = state.params;
  c.codebooks = state.codebooks;
  c.seed = config.train.seed;
  c.step = state.step;
  c.episodes_seen = state.episodes_seen;
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InvalidArgument("cannot create '" + dir.string() + "': " + ec.message());

  Checkpoint copy = ckpt;
  std::string blob;
  ojson table = ojson::array();
  std::size_t offset = 0;
  for (const auto& t : tensors(copy)) {
    const Array& a = *t.array;
    table.push_back({{"name", t.name},
                     {"shape", {a.rows(), a.cols()}},
                     {"offset", offset},
                     {"count", a.size()}});
    for (double v : a.data()) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      char bytes[8];
      std::memcpy(bytes, &bits, 8);
      blob.append(bytes, 8);
    }
    offset += a.size();
  }

  ojson manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["kind"] = ckpt.kind;
  manifest["seed"] = ckpt.seed;
  manifest["step"] = ckpt.step;
  manifest["episodes_seen"] = ckpt.episodes_seen;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["data_file"] = kData;
  manifest["tensors"] = std::move(table);
  manifest["config"] = ojson::parse(run_config_to_json(ckpt.config));

  write_file(dir / kData, blob);
  write_file(dir / kManifest, manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(dir, "not a checkpoint directory");
  const std::string text = read_file(dir, dir / kManifest);
  json m;
  try {
    m = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(dir, std::string("malformed manifest: ") + e.what());
  }

  try {
    if (!m.is_object() || m.value("format", "") != kFormat) {
      fail(dir, "manifest is not a vqc checkpoint");
    }
    const auto& version = m.at("version");
    if (!version.is_number_integer()) fail(dir, "manifest version must be an integer");
    const auto v = version.get<std::int64_t>();
    if (v > kCheckpointVersion) {
      fail(dir, "format version " + std::to_string(v) + " is newer than the supported version " +
                    std::to_string(kCheckpointVersion));
    }
    if (v < 1) fail(dir, "invalid format version " + std::to_string(v));
    if (m.at("dtype") != "float64" || m.at("byte_order") != "little") {
      fail(dir, "unsupported tensor encoding");
    }

    const RunConfig config =
        parse_run_config(m.at("config").dump(), (dir / kManifest).string() + " config");
    Checkpoint c = empty_for(config);
    c.kind = m.at("kind").get<std::string>();
    if (c.kind != "vqc" && c.kind != "codebook-free") fail(dir, "unknown kind '" + c.kind + "'");
    if ((c.kind == "codebook-free") != config.model.codebook_free) {
      fail(dir, "kind '" + c.kind + "' contradicts model.codebook_free");
    }
    c.seed = m.at("seed").get<std::uint64_t>();
    c.step = m.at("step").get<std::uint64_t>();
    c.episodes_seen = m.at("episodes_seen").get<std::uint64_t>();

    const auto& table = m.at("tensors");
    auto refs = tensors(c);
    if (!table.is_array() || table.size() != refs.size()) {
      fail(dir, "tensor table has " + std::to_string(table.size()) + " entries, config implies " +
                    std::to_string(refs.size()));
    }

    if (m.at("data_file") != kData) fail(dir, "unexpected data file name");
    const std::string blob = read_file(dir, dir / kData);
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& entry = table[i];
      Array& a = *refs[i].array;
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (name != refs[i].name) {
        fail(dir, "tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                      refs[i].name + "'");
      }
      if (shape != a.shape() || count != a.size()) {
        fail(dir, "tensor '" + name + "' has shape " + entry.at("shape").dump() +
                      ", config implies " + shape_string(a));
      }
      if (offset != expected_offset) fail(dir, "tensor '" + name + "' has a bad offset");
      expected_offset += count;
    }
    if (blob.size() != expected_offset * 8) {
      fail(dir, "data file holds " + std::to_string(blob.size()) + " bytes, manifest implies " +
                    std::to_string(expected_offset * 8));
    }

    std::size_t pos = 0;
    for (auto& r : refs) {
      for (double& value : r.array->data()) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, blob.data() + pos, 8);
        value = std::bit_cast<double>(to_little(bits));
        pos += 8;
      }
    }
    return c;
  } catch (const json::exception& e) {
    fail(dir, std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace vqc
