#include "checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "errors.hpp"

namespace nbr {
namespace {

constexpr char kMagic[8] = {'N', 'B', 'R', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw StructuralError("checkpoint " + path + ": truncated file");
  return v;
}

std::string read_bytes(std::ifstream& in, size_t n, const std::string& path) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw StructuralError("checkpoint " + path + ": truncated file");
  return s;
}

}  // namespace

void save_checkpoint_file(const std::string& path, const std::string& kind,
                          const nlohmann::json& meta,
                          const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(out, kCheckpointVersion);
  write_pod<uint32_t>(out, static_cast<uint32_t>(kind.size()));
  out.write(kind.data(), static_cast<std::streamsize>(kind.size()));
  const std::string meta_str = meta.dump();
  write_pod<uint64_t>(out, meta_str.size());
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  write_pod<uint64_t>(out, tensors.size());
  for (const auto& [name, m] : tensors) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(m->rows));
    write_pod<uint32_t>(out, static_cast<uint32_t>(m->cols));
    out.write(reinterpret_cast<const char*>(m->data.data()),
              static_cast<std::streamsize>(m->data.size() * sizeof(double)));
  }
  if (!out) throw IoError("short write to checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint_file(const std::string& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw StructuralError("checkpoint " + path + ": bad magic (not a checkpoint file)");
  }
  uint32_t version = read_pod<uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw StructuralError("checkpoint " + path + ": version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  LoadedCheckpoint ckpt;
  uint32_t kind_len = read_pod<uint32_t>(in, path);
  ckpt.kind = read_bytes(in, kind_len, path);
  if (!expected_kind.empty() && ckpt.kind != expected_kind) {
    throw StructuralError("checkpoint " + path + ": holds a '" + ckpt.kind + "' model, expected '" +
                          expected_kind + "'");
  }
  uint64_t meta_len = read_pod<uint64_t>(in, path);
  const std::string meta_str = read_bytes(in, meta_len, path);
  try {
    ckpt.meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::parse_error& e) {
    throw StructuralError("checkpoint " + path + ": corrupt metadata: " + e.what());
  }
  uint64_t count = read_pod<uint64_t>(in, path);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(in, path);
    std::string name = read_bytes(in, name_len, path);
    uint32_t rows = read_pod<uint32_t>(in, path);
    uint32_t cols = read_pod<uint32_t>(in, path);
    Matrix m(static_cast<int>(rows), static_cast<int>(cols));
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!in) throw StructuralError("checkpoint " + path + ": truncated file");
    if (!ckpt.tensors.emplace(std::move(name), std::move(m)).second) {
      throw StructuralError("checkpoint " + path + ": duplicate tensor name");
    }
  }
  in.peek();
  if (!in.eof()) throw StructuralError("checkpoint " + path + ": trailing bytes after tensors");
  return ckpt;
}

}  // namespace nbr
