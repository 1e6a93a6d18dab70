#pragma once

// Versioned little-endian binary container for named tensors and metadata
// blobs, with a trailing checksum. Shared by synthetic batch dumps,
// checkpoints and embedding sets.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "latcast/batch.hpp"

namespace latcast::io {

class Container {
 public:
  void put_f32(const std::string& name, std::vector<std::uint64_t> dims, std::vector<float> data);
  void put_f32_from_double(const std::string& name, std::vector<std::uint64_t> dims,
                           const std::vector<double>& data);
  void put_bytes(const std::string& name, std::string bytes);

  bool has(const std::string& name) const;
  const std::vector<float>& f32(const std::string& name) const;
  std::vector<double> f64(const std::string& name) const;
  const std::vector<std::uint64_t>& dims(const std::string& name) const;
  const std::string& bytes(const std::string& name) const;
  std::vector<std::string> names() const;

  // Atomic: writes to a temporary file in the same directory, then renames.
  void save(const std::string& path) const;
  // Validates magic, version and checksum; throws std::runtime_error.
  static Container load(const std::string& path);

 private:
  struct Entry {
    std::uint8_t dtype = 0;  // 0 = f32 tensor, 1 = raw bytes
    std::vector<std::uint64_t> dims;
    std::vector<float> f32;
    std::string raw;
  };
  const Entry& get(const std::string& name, std::uint8_t dtype) const;
  std::map<std::string, Entry> entries_;
};

// Atomic text-file write (temp + rename), used for JSON/CSV outputs.
void atomic_write_text(const std::string& path, const std::string& content);

// Batch serialization on top of the container.
void write_batches(const std::string& path, const std::vector<ContextBatch>& batches);
std::vector<ContextBatch> read_batches(const std::string& path);

}  // namespace latcast::io
