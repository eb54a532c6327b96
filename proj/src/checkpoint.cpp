#include "caesar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace caesar::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

constexpr int kFormatVersion = 1;

template <class T>
const char* dtype_name() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

template <class T>
void append(std::vector<char>& payload, config::json& tensors, const std::string& name, const std::string& kind,
            const Matrix<T>& m) {
  const std::size_t offset = payload.size();
  const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(T);
  payload.resize(offset + bytes);
  if (bytes > 0) std::memcpy(payload.data() + offset, m.data(), bytes);
  tensors.push_back({{"name", name},
                     {"kind", kind},
                     {"rows", m.rows()},
                     {"cols", m.cols()},
                     {"dtype", dtype_name<T>()},
                     {"offset", offset},
                     {"bytes", bytes}});
}

/// Reads a tensor entry into `out` (shape must already match), converting
/// between f32 and f64 when `convert` is set.
template <class T>
void extract(const Archive& a, const config::json& entry, Matrix<T>& out, bool convert) {
  const auto name = entry.at("name").get<std::string>();
  const Index rows = entry.at("rows").get<Index>(), cols = entry.at("cols").get<Index>();
  if (rows != out.rows() || cols != out.cols())
    throw FormatError("checkpoint tensor " + name + " has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                      ", model expects " + std::to_string(out.rows()) + "x" + std::to_string(out.cols()));
  const auto dtype = entry.at("dtype").get<std::string>();
  const std::size_t offset = entry.at("offset").get<std::size_t>(), bytes = entry.at("bytes").get<std::size_t>();
  const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
  if (width == 0) throw FormatError("checkpoint tensor " + name + ": unknown dtype " + dtype);
  if (bytes != static_cast<std::size_t>(rows * cols) * width || offset + bytes > a.payload.size())
    throw FormatError("checkpoint tensor " + name + ": payload out of range");
  if (width != sizeof(T) && !convert)
    throw FormatError("checkpoint tensor " + name + " is " + dtype + ", expected " + dtype_name<T>());
  const char* src = a.payload.data() + offset;
  for (Index i = 0; i < out.size(); ++i) {
    if (width == 8) {
      double v;
      std::memcpy(&v, src + i * 8, 8);
      out.data()[i] = static_cast<T>(v);
    } else {
      float v;
      std::memcpy(&v, src + i * 4, 4);
      out.data()[i] = static_cast<T>(v);
    }
  }
}

const config::json& find_tensor(const Archive& a, const std::string& name, const std::string& kind) {
  for (const auto& t : a.manifest.at("tensors"))
    if (t.at("name") == name && t.at("kind") == kind) return t;
  throw FormatError("checkpoint is missing tensor " + name + " (" + kind + ")");
}

}  // namespace

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len > (1ULL << 32)) throw FormatError(path.string() + ": bad manifest length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError(path.string() + ": truncated manifest");
  Archive a;
  a.manifest = config::json::parse(text, nullptr, false);
  if (a.manifest.is_discarded() || !a.manifest.is_object()) throw FormatError(path.string() + ": invalid manifest");
  if (a.manifest.value("format_version", 0) != kFormatVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version");
  a.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return a;
}

template <class T>
void save(const std::filesystem::path& path, const train::Trainer<T>& trainer, const config::RunConfig& config) {
  const auto& store = trainer.model().parameters();
  const auto& adam = trainer.optimizer().state();
  config::json tensors = config::json::array();
  std::vector<char> payload;
  for (std::size_t i = 0; i < store.size(); ++i) {
    append(payload, tensors, store[i].name, "param", store[i].value);
    append(payload, tensors, store[i].name, "adam_m", adam.m[i]);
    append(payload, tensors, store[i].name, "adam_v", adam.v[i]);
  }
  std::ostringstream rng;
  rng << trainer.rng();
  config::json manifest = {{"format_version", kFormatVersion},
                           {"precision", dtype_name<T>()},
                           {"iteration", trainer.iteration()},
                           {"adam_step", adam.step},
                           {"rng_state", rng.str()},
                           {"config", config::to_json(config)},
                           {"tensors", tensors}};
  const std::string text = manifest.dump();
  const std::uint64_t len = text.size();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw FormatError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
void restore(const Archive& archive, train::Trainer<T>& trainer) {
  const auto& m = archive.manifest;
  if (m.at("precision").get<std::string>() != dtype_name<T>())
    throw FormatError("checkpoint precision " + m.at("precision").get<std::string>() + " does not match trainer");
  auto& store = trainer.model().parameters();
  auto& adam = trainer.optimizer().state();
  for (std::size_t i = 0; i < store.size(); ++i) {
    extract(archive, find_tensor(archive, store[i].name, "param"), store[i].value, false);
    extract(archive, find_tensor(archive, store[i].name, "adam_m"), adam.m[i], false);
    extract(archive, find_tensor(archive, store[i].name, "adam_v"), adam.v[i], false);
  }
  std::size_t params = 0;
  for (const auto& t : m.at("tensors"))
    if (t.at("kind") == "param") ++params;
  if (params != store.size()) throw FormatError("checkpoint parameter count does not match the model");
  adam.step = m.at("adam_step").get<std::int64_t>();
  std::istringstream rng(m.at("rng_state").get<std::string>());
  rng >> trainer.rng();
  if (!rng) throw FormatError("checkpoint rng state is corrupt");
  trainer.set_iteration(m.at("iteration").get<int>());
}

config::RunConfig stored_config(const Archive& archive) {
  auto c = config::from_json(archive.manifest.at("config"));
  c.finalize();
  return c;
}

template <class T>
std::unique_ptr<render::CaesarModel<T>> load_model(const Archive& archive) {
  const auto c = stored_config(archive);
  auto model = std::make_unique<render::CaesarModel<T>>(c.model);
  auto& store = model->parameters();
  for (std::size_t i = 0; i < store.size(); ++i)
    extract(archive, find_tensor(archive, store[i].name, "param"), store[i].value, true);
  return model;
}

#define CAESAR_CHECKPOINT_INSTANTIATE(T)                                                                  \
  template void save<T>(const std::filesystem::path&, const train::Trainer<T>&, const config::RunConfig&); \
  template void restore<T>(const Archive&, train::Trainer<T>&);                                           \
  template std::unique_ptr<render::CaesarModel<T>> load_model<T>(const Archive&);

CAESAR_CHECKPOINT_INSTANTIATE(float)
CAESAR_CHECKPOINT_INSTANTIATE(double)

}  // namespace caesar::checkpoint
