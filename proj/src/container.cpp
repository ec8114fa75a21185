#include "calm/container.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "calm/error.hpp"

namespace calm {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out += static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
}

void put_string(std::string& out, std::string_view s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("container truncated at byte " + std::to_string(pos_));
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Container::find(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const std::string& Container::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw CheckpointError("container lacks metadata key '" + key + "'");
  return it->second;
}

std::string encode_container(const Container& c) {
  std::string out(kContainerMagic);
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.metadata.size()));
  for (const auto& [k, v] : c.metadata) {
    put_string(out, k);
    put_string(out, v);
  }
  put_le<std::uint64_t>(out, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    put_string(out, name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Container decode_container(std::string_view bytes) {
  Reader in(bytes);
  if (bytes.substr(0, kContainerMagic.size()) != kContainerMagic) throw CheckpointError("not a CALM1 container");
  in.raw(kContainerMagic.size());
  if (const auto version = in.get<std::uint32_t>(); version != kContainerVersion) {
    throw CheckpointError("unsupported container version " + std::to_string(version));
  }
  Container c;
  const auto n_meta = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = in.get_string();
    c.metadata[k] = in.get_string();
  }
  const auto n_tensors = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = in.get_string();
    const auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = in.get<std::uint64_t>();
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = std::bit_cast<double>(in.get<std::uint64_t>());
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.at_end()) throw CheckpointError("trailing bytes after container payload");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string bytes = encode_container(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_container(ss.str());
}

}  // namespace calm
