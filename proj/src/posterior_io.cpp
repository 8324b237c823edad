#include <bit>
#include <cstring>
#include <limits>

#include "fntk/errors.hpp"
#include "fntk/io.hpp"
#include "fntk/ntk_gp.hpp"

static_assert(std::endian::native == std::endian::little,
              "posterior cache writer assumes a little-endian host");

namespace fntk {

namespace {

constexpr char kMagic[8] = {'F', 'N', 'T', 'K', 'P', 'O', 'S', 'T'};

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_doubles(const double* data, std::size_t count) {
    buf_.append(reinterpret_cast<const char*>(data), count * sizeof(double));
  }
  void put_string(const std::string& s) { buf_.append(s); }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_doubles(double* out, std::size_t count) {
    need(count * sizeof(double));
    std::memcpy(out, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }
  std::string get_string(std::size_t count) {
    need(count);
    std::string out(bytes_.substr(pos_, count));
    pos_ += count;
    return out;
  }
  // Guards allocations against corrupt size fields.
  void expect_doubles(std::uint64_t count) const {
    if (count > (bytes_.size() - pos_) / sizeof(double)) {
      throw InputError("posterior cache: truncated file");
    }
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw InputError("posterior cache: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_posterior(const NtkPosterior& post) {
  Writer w;
  for (char c : kMagic) w.put(c);
  w.put(kPosteriorFormatVersion);
  w.put(static_cast<std::uint8_t>(post.space == InferenceSpace::function ? 0 : 1));
  w.put(static_cast<std::uint8_t>(post.mean_kind));
  w.put(post.noise_variance);
  w.put(post.network_fingerprint);
  w.put(static_cast<std::uint64_t>(post.channels.size()));
  for (Index c : post.channels) w.put(static_cast<std::int64_t>(c));
  w.put(static_cast<std::uint64_t>(post.mean_cache.size()));
  w.put_doubles(post.mean_cache.data(), static_cast<std::size_t>(post.mean_cache.size()));
  w.put(static_cast<std::uint64_t>(post.variance_root.rows()));
  w.put(static_cast<std::uint64_t>(post.variance_root.cols()));
  // Column-major, as stored.
  w.put_doubles(post.variance_root.data(), static_cast<std::size_t>(post.variance_root.size()));
  w.put(static_cast<std::uint64_t>(post.provenance.size()));
  w.put_string(post.provenance);
  return w.take();
}

NtkPosterior deserialize_posterior(std::string_view bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.get<char>() != c) throw InputError("posterior cache: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kPosteriorFormatVersion) {
    throw InputError("posterior cache: unsupported version " + std::to_string(version));
  }
  NtkPosterior post;
  const auto space = r.get<std::uint8_t>();
  if (space > 1) throw InputError("posterior cache: bad space tag");
  post.space = space == 0 ? InferenceSpace::function : InferenceSpace::parameter;
  const auto mean = r.get<std::uint8_t>();
  if (mean > static_cast<std::uint8_t>(MeanFunctionKind::network_output)) {
    throw InputError("posterior cache: bad mean tag");
  }
  post.mean_kind = static_cast<MeanFunctionKind>(mean);
  post.noise_variance = r.get<double>();
  post.network_fingerprint = r.get<std::uint64_t>();
  const auto nch = r.get<std::uint64_t>();
  for (std::uint64_t k = 0; k < nch; ++k) post.channels.push_back(r.get<std::int64_t>());
  const auto p = r.get<std::uint64_t>();
  r.expect_doubles(p);
  post.mean_cache.resize(static_cast<Index>(p));
  r.get_doubles(post.mean_cache.data(), p);
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  if (cols != 0 && rows > std::numeric_limits<std::uint64_t>::max() / cols) {
    throw InputError("posterior cache: bad root shape");
  }
  r.expect_doubles(rows * cols);
  post.variance_root.resize(static_cast<Index>(rows), static_cast<Index>(cols));
  r.get_doubles(post.variance_root.data(), rows * cols);
  post.provenance = r.get_string(r.get<std::uint64_t>());
  if (!r.done()) throw InputError("posterior cache: trailing bytes");
  post.lanczos_rank = static_cast<Index>(cols);
  return post;
}

void save_posterior(const NtkPosterior& posterior, const std::string& path) {
  write_file_atomic(path, serialize_posterior(posterior));
}

NtkPosterior load_posterior(const std::string& path) {
  return deserialize_posterior(read_file(path));
}

}  // namespace fntk
