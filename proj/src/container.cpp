#include "latcast/container.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace latcast::io {

namespace {

constexpr char kMagic[4] = {'L', 'T', 'C', 'T'};
constexpr std::uint32_t kVersion = 1;

struct Fnv1a {
  std::uint64_t state = 0xcbf29ce484222325ULL;
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      state ^= p[i];
      state *= 0x100000001b3ULL;
    }
  }
};

struct Writer {
  std::string buf;
  void raw(const void* data, std::size_t len) {
    buf.append(static_cast<const char*>(data), len);
  }
  template <typename T>
  void num(T v) {
    raw(&v, sizeof(v));  // fields are stored little-endian; big-endian hosts unsupported
  }
  void str(const std::string& s) {
    num<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  void raw(void* out, std::size_t len) {
    if (pos + len > buf.size()) throw std::runtime_error("container truncated");
    std::memcpy(out, buf.data() + pos, len);
    pos += len;
  }
  template <typename T>
  T num() {
    T v;
    raw(&v, sizeof(v));
    return v;
  }
  std::string str() {
    const auto len = num<std::uint32_t>();
    std::string s(len, '\0');
    raw(s.data(), len);
    return s;
  }
};

void atomic_write(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to: " + tmp.string());
  }
  fs::rename(tmp, target);
}

}  // namespace

void Container::put_f32(const std::string& name, std::vector<std::uint64_t> dims,
                        std::vector<float> data) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  if (n != data.size())
    throw std::invalid_argument("container entry '" + name + "': dims do not match data length");
  Entry e;
  e.dtype = 0;
  e.dims = std::move(dims);
  e.f32 = std::move(data);
  entries_[name] = std::move(e);
}

void Container::put_f32_from_double(const std::string& name, std::vector<std::uint64_t> dims,
                                    const std::vector<double>& data) {
  std::vector<float> f(data.begin(), data.end());
  put_f32(name, std::move(dims), std::move(f));
}

void Container::put_bytes(const std::string& name, std::string bytes) {
  Entry e;
  e.dtype = 1;
  e.raw = std::move(bytes);
  entries_[name] = std::move(e);
}

bool Container::has(const std::string& name) const { return entries_.count(name) > 0; }

const Container::Entry& Container::get(const std::string& name, std::uint8_t dtype) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::runtime_error("container entry not found: " + name);
  if (it->second.dtype != dtype)
    throw std::runtime_error("container entry has wrong type: " + name);
  return it->second;
}

const std::vector<float>& Container::f32(const std::string& name) const {
  return get(name, 0).f32;
}

std::vector<double> Container::f64(const std::string& name) const {
  const auto& f = f32(name);
  return std::vector<double>(f.begin(), f.end());
}

const std::vector<std::uint64_t>& Container::dims(const std::string& name) const {
  return get(name, 0).dims;
}

const std::string& Container::bytes(const std::string& name) const { return get(name, 1).raw; }

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void Container::save(const std::string& path) const {
  Writer w;
  w.raw(kMagic, 4);
  w.num<std::uint32_t>(kVersion);
  w.num<std::uint64_t>(entries_.size());
  for (const auto& [name, e] : entries_) {
    w.str(name);
    w.num<std::uint8_t>(e.dtype);
    if (e.dtype == 0) {
      w.num<std::uint32_t>(static_cast<std::uint32_t>(e.dims.size()));
      for (auto d : e.dims) w.num<std::uint64_t>(d);
      w.num<std::uint64_t>(e.f32.size() * sizeof(float));
      w.raw(e.f32.data(), e.f32.size() * sizeof(float));
    } else {
      w.num<std::uint64_t>(e.raw.size());
      w.raw(e.raw.data(), e.raw.size());
    }
  }
  Fnv1a h;
  h.update(w.buf.data(), w.buf.size());
  w.num<std::uint64_t>(h.state);
  atomic_write(path, w.buf);
}

Container Container::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open container: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8 + 8) throw std::runtime_error("container truncated: " + path);

  Fnv1a h;
  h.update(buf.data(), buf.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != h.state) throw std::runtime_error("container checksum mismatch: " + path);

  Reader r{buf};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a container file: " + path);
  const auto version = r.num<std::uint32_t>();
  if (version != kVersion)
    throw std::runtime_error("unsupported container version " + std::to_string(version) + ": " + path);

  Container c;
  const auto count = r.num<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    Entry e;
    e.dtype = r.num<std::uint8_t>();
    if (e.dtype == 0) {
      const auto ndim = r.num<std::uint32_t>();
      e.dims.resize(ndim);
      for (auto& d : e.dims) d = r.num<std::uint64_t>();
      const auto bytes = r.num<std::uint64_t>();
      e.f32.resize(bytes / sizeof(float));
      r.raw(e.f32.data(), bytes);
    } else if (e.dtype == 1) {
      const auto bytes = r.num<std::uint64_t>();
      e.raw.resize(bytes);
      r.raw(e.raw.data(), bytes);
    } else {
      throw std::runtime_error("unknown entry dtype in container: " + path);
    }
    c.entries_[name] = std::move(e);
  }
  return c;
}

void atomic_write_text(const std::string& path, const std::string& content) {
  atomic_write(path, content);
}

// ---------------------------------------------------------------------------
// Batch serialization.

void write_batches(const std::string& path, const std::vector<ContextBatch>& batches) {
  Container c;
  c.put_f32("batch_count", {1}, {static_cast<float>(batches.size())});
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto& b = batches[i];
    const std::string p = "batch" + std::to_string(i) + "/";
    const std::uint64_t S = b.seq_len, H = b.horizon, F = ContextBatch::kFeatures;
    c.put_f32_from_double(p + "context", {b.n_ctx, S, F}, b.context);
    c.put_f32_from_double(p + "held_history", {b.n_held, S - H, F}, b.held_history);
    c.put_f32_from_double(p + "held_full", {b.n_held, S, F}, b.held_full);
    c.put_f32_from_double(p + "held_target", {b.n_held, H}, b.held_target);
    c.put_f32_from_double(p + "tau", {S}, b.tau);
    if (!b.psi_targets.empty())
      c.put_f32_from_double(p + "psi_targets", {b.n_held, b.psi_targets.size() / b.n_held},
                            b.psi_targets);
    std::vector<double> stats;
    for (const auto& s : b.held_stats) {
      stats.push_back(s.mean);
      stats.push_back(s.stddev);
      stats.push_back(s.scale);
      stats.push_back(s.degenerate ? 1.0 : 0.0);
    }
    c.put_f32_from_double(p + "held_stats", {b.n_held, 4}, stats);
    c.put_f32(p + "flags", {1}, {b.trend_overflow ? 1.0f : 0.0f});
  }
  c.save(path);
}

std::vector<ContextBatch> read_batches(const std::string& path) {
  const Container c = Container::load(path);
  const auto count = static_cast<std::size_t>(c.f32("batch_count")[0]);
  std::vector<ContextBatch> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string p = "batch" + std::to_string(i) + "/";
    ContextBatch& b = out[i];
    const auto& cd = c.dims(p + "context");
    b.n_ctx = cd[0];
    b.seq_len = cd[1];
    b.n_held = c.dims(p + "held_history")[0];
    b.horizon = c.dims(p + "held_target")[1];
    b.context = c.f64(p + "context");
    b.held_history = c.f64(p + "held_history");
    b.held_full = c.f64(p + "held_full");
    b.held_target = c.f64(p + "held_target");
    b.tau = c.f64(p + "tau");
    if (c.has(p + "psi_targets")) b.psi_targets = c.f64(p + "psi_targets");
    const auto stats = c.f64(p + "held_stats");
    b.held_stats.resize(b.n_held);
    for (std::size_t h = 0; h < b.n_held; ++h) {
      b.held_stats[h].mean = stats[h * 4 + 0];
      b.held_stats[h].stddev = stats[h * 4 + 1];
      b.held_stats[h].scale = stats[h * 4 + 2];
      b.held_stats[h].degenerate = stats[h * 4 + 3] != 0.0;
    }
    b.trend_overflow = c.f32(p + "flags")[0] != 0.0f;
  }
  return out;
}

}  // namespace latcast::io
