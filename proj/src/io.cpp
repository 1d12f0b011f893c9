#include "embedkit/io.hpp"

#include <unistd.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "embedkit/config.hpp"

namespace embedkit {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace fs = std::filesystem;

namespace {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void put(T v) {
    raw(&v, sizeof v);
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void checksum() { put<std::uint64_t>(fnv1a(bytes())); }
  std::span<const unsigned char> bytes() const {
    return {reinterpret_cast<const unsigned char*>(out_.data()), out_.size()};
  }
  const std::string& data() const { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::size_t limit, std::string origin)
      : data_(data), limit_(limit), origin_(std::move(origin)) {}

  void raw(void* p, std::size_t n) {
    if (n > limit_ - pos_) throw Error(Errc::TruncatedFile, origin_ + ": file ends early");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    if (n > limit_ - pos_) throw Error(Errc::TruncatedFile, origin_ + ": file ends early");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return limit_ - pos_; }

 private:
  const std::string& data_;
  std::size_t limit_;
  std::size_t pos_ = 0;
  std::string origin_;
};

void expect_magic(const std::string& bytes, const char (&magic)[5], const fs::path& path) {
  if (bytes.size() < 4) throw Error(Errc::TruncatedFile, path.string() + ": shorter than its magic bytes");
  if (bytes.compare(0, 4, magic) != 0) {
    throw Error(Errc::BadMagic, path.string() + ": expected magic '" + std::string(magic) + "'");
  }
}

// Splits off and verifies the trailing FNV-1a checksum; returns the body length.
std::size_t verify_checksum(const std::string& bytes, const fs::path& path) {
  if (bytes.size() < 12) throw Error(Errc::TruncatedFile, path.string() + ": too short for a checksum");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  const auto actual = fnv1a({reinterpret_cast<const unsigned char*>(bytes.data()), body});
  if (stored != actual) throw Error(Errc::ChecksumMismatch, path.string() + ": checksum mismatch");
  return body;
}

void finish(const ByteReader& r, const fs::path& path) {
  if (r.remaining() != 0) throw Error(Errc::TruncatedFile, path.string() + ": unexpected trailing bytes");
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw Error(Errc::IoError, "write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(Errc::IoError, "cannot rename onto " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_embeddings(const EmbeddingSet& set, const fs::path& path) {
  if (set.dim() != kEmbeddingDim) {
    throw Error(Errc::WrongDim, "embedding files hold 64-d embeddings; got " + std::to_string(set.dim()) + "-d");
  }
  set.validate();
  ByteWriter w;
  w.raw("EMB1", 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.dim()));
  for (Index i = 0; i < set.size(); ++i) {
    const int label = set.labels[static_cast<std::size_t>(i)];
    if (label < 0) throw Error(Errc::InvalidLabel, "labels must be non-negative to fit u32");
    w.put<std::uint64_t>(set.ids[static_cast<std::size_t>(i)]);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(label));
    for (Index d = 0; d < set.dim(); ++d) w.put<float>(static_cast<float>(set.values(i, d)));
  }
  write_file_atomic(path, w.data());
}

EmbeddingSet load_embeddings(const fs::path& path) {
  const std::string bytes = read_file(path);
  expect_magic(bytes, "EMB1", path);
  ByteReader r(bytes, bytes.size(), path.string());
  r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  const auto dim = r.get<std::uint32_t>();
  if (dim != kEmbeddingDim) {
    throw Error(Errc::WrongDim, path.string() + ": dim header is " + std::to_string(dim) +
                                    "; embedding files must be 64-d");
  }
  const std::uint64_t expected = 12 + static_cast<std::uint64_t>(n) * (8 + 4 + 4 * dim);
  if (bytes.size() != expected) {
    throw Error(Errc::TruncatedFile, path.string() + ": length " + std::to_string(bytes.size()) + " != expected " +
                                         std::to_string(expected));
  }
  EmbeddingSet set;
  set.values.resize(n, dim);
  set.ids.resize(n);
  set.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    set.ids[i] = r.get<std::uint64_t>();
    set.labels[i] = static_cast<int>(r.get<std::uint32_t>());
    for (std::uint32_t d = 0; d < dim; ++d) set.values(i, d) = r.get<float>();
  }
  return set;
}

void save_checkpoint(const EmbeddingModel& model, const fs::path& path) {
  ByteWriter w;
  w.raw("EKCP", 4);
  w.put<std::uint32_t>(1);
  w.str(nlohmann::json(model.config()).dump());
  const auto params = model.parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    w.str(p->name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p->tensor.rank()));
    for (Index d : p->tensor.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.put<std::uint8_t>(p->trainable ? 1 : 0);
    const auto values = p->tensor.values();
    w.raw(values.data(), values.size() * sizeof(double));
  }
  w.checksum();
  write_file_atomic(path, w.data());
}

EmbeddingModel load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  expect_magic(bytes, "EKCP", path);
  const std::size_t body = verify_checksum(bytes, path);
  ByteReader r(bytes, body, path.string());
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != 1) throw Error(Errc::InvalidConfig, path.string() + ": unsupported checkpoint version");
  const auto config = parse_json(r.str(), path.string()).get<ModelConfig>();
  EmbeddingModel model(config);
  auto params = model.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) {
    throw Error(Errc::InvalidConfig, path.string() + ": holds " + std::to_string(count) + " parameters, model has " +
                                         std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    const std::string name = r.str();
    if (name != p->name) throw Error(Errc::InvalidConfig, path.string() + ": expected '" + p->name + "', found '" + name + "'");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<Index>(r.get<std::uint64_t>());
    if (shape != p->tensor.shape()) {
      throw Error(Errc::InvalidConfig, path.string() + ": '" + name + "' has shape " + shape_str(shape) +
                                           ", model expects " + shape_str(p->tensor.shape()));
    }
    p->trainable = r.get<std::uint8_t>() != 0;
    p->tensor.set_requires_grad(p->trainable);
    auto values = p->tensor.mutable_values();
    r.raw(values.data(), values.size() * sizeof(double));
  }
  finish(r, path);
  return model;
}

void save_adapter(const Adapter& adapter, const fs::path& path) {
  ByteWriter w;
  w.raw("EKAD", 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(adapter.dim()));
  w.raw(adapter.A.data(), static_cast<std::size_t>(adapter.A.size()) * sizeof(double));
  w.raw(adapter.b.data(), static_cast<std::size_t>(adapter.b.size()) * sizeof(double));
  w.checksum();
  write_file_atomic(path, w.data());
}

Adapter load_adapter(const fs::path& path) {
  const std::string bytes = read_file(path);
  expect_magic(bytes, "EKAD", path);
  const std::size_t body = verify_checksum(bytes, path);
  ByteReader r(bytes, body, path.string());
  r.get<std::uint32_t>();
  const auto dim = static_cast<Index>(r.get<std::uint32_t>());
  Adapter a{RowMatrixXd(dim, dim), Eigen::VectorXd(dim)};
  r.raw(a.A.data(), static_cast<std::size_t>(a.A.size()) * sizeof(double));
  r.raw(a.b.data(), static_cast<std::size_t>(a.b.size()) * sizeof(double));
  finish(r, path);
  return a;
}

namespace {

fs::path image_file(const fs::path& dir, SplitKind kind) {
  return dir / (std::string("images_") + split_name(kind) + ".bin");
}

constexpr SplitKind kSplits[] = {SplitKind::Train, SplitKind::Query, SplitKind::Index};

}  // namespace

// Image files: "EKIM" | u32 N | u32 C | u32 R | N x u64 id | f64 pixels | u64 FNV-1a.
void save_dataset(const SyntheticDataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  const int res = data.spec().image_size;
  for (SplitKind kind : kSplits) {
    const DatasetSplit& split = data.split(kind);
    const Tensor images = data.images(kind, res);
    ByteWriter w;
    w.raw("EKIM", 4);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(split.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(data.spec().channels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(res));
    for (auto id : split.ids) w.put<std::uint64_t>(id);
    w.raw(images.values().data(), images.values().size() * sizeof(double));
    w.checksum();
    write_file_atomic(image_file(dir, kind), w.data());
  }
  write_file_atomic(dir / "dataset.json", nlohmann::json(data.spec()).dump(2) + "\n");
}

SyntheticDataset load_dataset(const fs::path& dir) {
  SyntheticDataset data(load_dataset_spec(dir / "dataset.json"));
  const int res = data.spec().image_size;
  for (SplitKind kind : kSplits) {
    const fs::path path = image_file(dir, kind);
    const std::string bytes = read_file(path);
    expect_magic(bytes, "EKIM", path);
    const std::size_t body = verify_checksum(bytes, path);
    ByteReader r(bytes, body, path.string());
    r.get<std::uint32_t>();
    const auto n = r.get<std::uint32_t>();
    const auto c = r.get<std::uint32_t>();
    const auto side = r.get<std::uint32_t>();
    const DatasetSplit& split = data.split(kind);
    if (n != split.size() || static_cast<int>(c) != data.spec().channels || static_cast<int>(side) != res) {
      throw Error(Errc::MisalignedSets, path.string() + ": header does not match dataset.json");
    }
    for (std::uint32_t i = 0; i < n; ++i) {
      if (r.get<std::uint64_t>() != split.ids[i]) {
        throw Error(Errc::MisalignedSets, path.string() + ": item ids do not match dataset.json");
      }
    }
    Tensor images({static_cast<Index>(n), static_cast<Index>(c), res, res});
    auto values = images.mutable_values();
    r.raw(values.data(), values.size() * sizeof(double));
    finish(r, path);
    data.set_images(kind, res, images);
  }
  return data;
}

}  // namespace embedkit
