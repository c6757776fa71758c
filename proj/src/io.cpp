#include "rpp/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rpp/error.hpp"

namespace rpp {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr char kParamMagic[8] = {'R', 'P', 'P', 'P', 'A', 'R', 'A', 'M'};
constexpr char kArrayMagic[8] = {'R', 'P', 'P', 'C', 'O', 'R', 'P', 'S'};

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  template <typename T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= in_.size(), ErrorKind::kIo, "truncated file at byte " + std::to_string(pos_));
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_meta(Writer& w, const std::map<std::string, std::string>& meta) {
  w.pod(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
}

std::map<std::string, std::string> read_meta(Reader& r) {
  std::map<std::string, std::string> meta;
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.str();
    meta[k] = r.str();
  }
  return meta;
}

void check_magic(Reader& r, const char (&magic)[8], std::uint32_t version, const char* what) {
  char got[8];
  r.raw(got, 8);
  require(std::memcmp(got, magic, 8) == 0, ErrorKind::kIo, std::string("not a ") + what + " file");
  const auto v = r.pod<std::uint32_t>();
  require(v == version, ErrorKind::kIo, std::string(what) + " version " + std::to_string(v) + " unsupported");
}

}  // namespace

const std::string& ParamFile::get(const std::string& key) const {
  auto it = meta.find(key);
  require(it != meta.end(), ErrorKind::kIo, "parameter file lacks header key '" + key + "'");
  return it->second;
}

const Tensor& ParamFile::param(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  fail(ErrorKind::kIo, "parameter file lacks tensor '" + name + "'");
}

const std::string& ArrayFile::get(const std::string& key) const {
  auto it = meta.find(key);
  require(it != meta.end(), ErrorKind::kIo, "array file lacks header key '" + key + "'");
  return it->second;
}

const std::vector<int>& ArrayFile::array(const std::string& name) const {
  for (const auto& [n, a] : arrays)
    if (n == name) return a;
  fail(ErrorKind::kIo, "array file lacks array '" + name + "'");
}

std::string serialize(const ParamFile& file) {
  Writer w;
  w.raw(kParamMagic, 8);
  w.pod(kParamFileVersion);
  write_meta(w, file.meta);
  w.pod(static_cast<std::uint32_t>(file.params.size()));
  for (const auto& [name, t] : file.params) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.pod(static_cast<std::uint64_t>(d));
    w.raw(t.data().data(), t.numel() * sizeof(double));
  }
  return w.take();
}

ParamFile deserialize_params(const std::string& bytes) {
  Reader r(bytes);
  check_magic(r, kParamMagic, kParamFileVersion, "parameter table");
  ParamFile file;
  file.meta = read_meta(r);
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    std::vector<double> values(shape_numel(shape));
    r.raw(values.data(), values.size() * sizeof(double));
    file.params.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  require(r.done(), ErrorKind::kIo, "trailing bytes in parameter table");
  return file;
}

std::string serialize(const ArrayFile& file) {
  Writer w;
  w.raw(kArrayMagic, 8);
  w.pod(kArrayFileVersion);
  write_meta(w, file.meta);
  w.pod(static_cast<std::uint32_t>(file.arrays.size()));
  for (const auto& [name, a] : file.arrays) {
    w.str(name);
    w.pod(static_cast<std::uint64_t>(a.size()));
    for (int v : a) w.pod(static_cast<std::int32_t>(v));
  }
  return w.take();
}

ArrayFile deserialize_arrays(const std::string& bytes) {
  Reader r(bytes);
  check_magic(r, kArrayMagic, kArrayFileVersion, "corpus");
  ArrayFile file;
  file.meta = read_meta(r);
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const auto count = r.pod<std::uint64_t>();
    std::vector<int> a(count);
    for (auto& v : a) v = r.pod<std::int32_t>();
    file.arrays.emplace_back(std::move(name), std::move(a));
  }
  require(r.done(), ErrorKind::kIo, "trailing bytes in corpus file");
  return file;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::kIo, "write to '" + path + "' failed");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_params(const std::string& path, const ParamFile& file) { write_file(path, serialize(file)); }
ParamFile load_params(const std::string& path) { return deserialize_params(read_file(path)); }
void save_arrays(const std::string& path, const ArrayFile& file) { write_file(path, serialize(file)); }
ArrayFile load_arrays(const std::string& path) { return deserialize_arrays(read_file(path)); }

std::string content_hash(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string content_hash(const std::string& bytes) { return content_hash(std::span<const char>(bytes)); }

std::string tensors_hash(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::string buf;
  for (const auto& [name, t] : named) {
    buf += name;
    buf.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(double));
  }
  return content_hash(buf);
}

void assign_params(const ParamFile& file, const std::vector<std::pair<std::string, Tensor>>& targets) {
  for (const auto& [name, target] : targets) {
    const Tensor& src = file.param(name);
    require(src.shape() == target.shape(), ErrorKind::kIo,
            "tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " + shape_str(target.shape()));
    Tensor dst = target;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

}  // namespace rpp
