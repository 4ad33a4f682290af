#include "ctdg/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>

#include "byte_io.hpp"

namespace ctdg {

namespace {

constexpr char kMagic[4] = {'C', 'T', 'D', 'G'};
using detail::put;
using Reader = detail::ByteReader;

}  // namespace

std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string out(kMagic, 4);
  put<uint32_t>(out, kCheckpointVersion);
  put<uint32_t>(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > UINT16_MAX) throw FormatError("entry name too long: " + e.name);
    if (e.value.rank() > UINT8_MAX) throw FormatError("entry rank too large: " + e.name);
    put<uint16_t>(out, static_cast<uint16_t>(e.name.size()));
    out += e.name;
    put<uint8_t>(out, static_cast<uint8_t>(e.dtype));
    put<uint8_t>(out, static_cast<uint8_t>(e.value.rank()));
    for (int64_t extent : e.value.shape()) put<uint32_t>(out, static_cast<uint32_t>(extent));
    for (double v : e.value.data()) {
      if (e.dtype == DType::f32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes, "checkpoint");
  if (r.take(4, "magic") != std::string(kMagic, 4)) throw FormatError("not a CTDG checkpoint (bad magic)");
  const auto version = r.get<uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.get<uint32_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = r.get<uint16_t>("name length");
    e.name = r.take(len, "name");
    const auto dtype = r.get<uint8_t>("dtype");
    if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype) + " for entry " + e.name);
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<uint8_t>("rank");
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(r.get<uint32_t>("extent"));
    const int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = e.dtype == DType::f32 ? static_cast<double>(r.get<float>("values")) : r.get<double>("values");
    e.value = Tensor(std::move(shape), std::move(data));
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(r.pos()));
  return entries;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  write_file_bytes(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

std::vector<CheckpointEntry> snapshot(const ParameterStore& store, DType dtype) {
  std::vector<CheckpointEntry> out;
  for (const Parameter* p : store.parameters()) out.push_back({p->name, dtype, p->value.value()});
  for (const auto& [name, t] : store.buffers()) out.push_back({name, dtype, *t});
  return out;
}

void restore(ParameterStore& store, const std::vector<CheckpointEntry>& entries) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing entry '" + name + "'");
    if (it->second->value.shape() != shape) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + shape_str(it->second->value.shape()) +
                        ", model expects " + shape_str(shape));
    }
    return it->second->value;
  };
  for (Parameter* p : store.parameters()) p->value.mutable_value() = fetch(p->name, p->value.shape());
  for (auto& [name, t] : store.buffers()) *t = fetch(name, t->shape());
}

}  // namespace ctdg
