#include <cstring>
#include <fstream>
#include <map>

#include "brainseg/drunet.hpp"
#include "brainseg/error.hpp"

namespace brainseg {
namespace {

constexpr char kMagic[4] = {'D', 'R', 'W', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string take(std::size_t n, const char* field) {
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) throw FormatError(path_ + ": truncated weight file while reading " + field);
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_weights(const Network& net, const std::filesystem::path& path) {
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, kVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(net.arrays().size()));
  for (const auto& a : net.arrays()) {
    if (a.name.size() > 0xFFFF) throw ArgumentError("parameter name too long: " + a.name);
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(a.name.size()));
    buf += a.name;
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(a.shape.size()));
    for (int d : a.shape) put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    for (double v : a.value) put<float>(buf, static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Network load_weights(const DRUNetConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Cursor cur(bytes, path.string());
  if (cur.take(4, "magic") != std::string(kMagic, 4)) throw FormatError(path.string() + ": bad magic, expected DRW1");
  const auto version = cur.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto count = cur.get<std::uint32_t>("entry count");

  struct Entry {
    std::vector<int> shape;
    std::vector<double> values;
  };
  std::map<std::string, Entry> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = cur.get<std::uint16_t>("name length");
    std::string name = cur.take(name_len, "name");
    const auto rank = cur.get<std::uint8_t>("rank");
    Entry entry;
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      const auto d = cur.get<std::uint32_t>("dims");
      entry.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    entry.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) entry.values[i] = cur.get<float>("payload");
    if (!entries.emplace(name, std::move(entry)).second) {
      throw FormatError(path.string() + ": duplicate entry '" + name + "'");
    }
  }
  if (!cur.at_end()) throw FormatError(path.string() + ": trailing bytes after last entry");

  Network net(config, 0);
  for (auto& a : net.arrays()) {
    auto it = entries.find(a.name);
    if (it == entries.end()) throw FormatError(path.string() + ": missing entry '" + a.name + "'");
    if (it->second.shape != a.shape) {
      throw ShapeError(path.string() + ": entry '" + a.name + "' has a shape that does not match the configuration");
    }
    a.value = std::move(it->second.values);
    entries.erase(it);
  }
  if (!entries.empty()) {
    throw FormatError(path.string() + ": unexpected entry '" + entries.begin()->first + "' for this configuration");
  }
  net.set_mode(Mode::Eval);
  return net;
}

}  // namespace brainseg
