#include "covidnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace covidnet {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint codec assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'N', 'C', 'T'};
constexpr std::string_view kMetaStep = "__meta__:step";
constexpr std::string_view kMetaValAccuracy = "__meta__:val_accuracy";

bool is_meta(std::string_view name) { return name.rfind("__meta__:", 0) == 0; }

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(V));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename V>
  V get(const char* what) {
    V v;
    need(sizeof(V), what);
    std::memcpy(&v, in_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

CheckpointTensor scalar_tensor(std::string_view name, double v) {
  return {std::string(name), {1}, std::vector<double>{v}};
}

}  // namespace

std::size_t CheckpointTensor::size() const {
  return std::visit([](const auto& v) { return v.size(); }, values);
}

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<const CheckpointTensor*> all;
  for (const auto& t : ckpt.tensors) {
    if (!is_meta(t.name)) all.push_back(&t);
  }
  const CheckpointTensor step = scalar_tensor(kMetaStep, static_cast<double>(ckpt.step));
  all.push_back(&step);
  std::optional<CheckpointTensor> acc;
  if (ckpt.val_accuracy) {
    acc = scalar_tensor(kMetaValAccuracy, *ckpt.val_accuracy);
    all.push_back(&*acc);
  }

  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(ckpt.version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(all.size()));
  for (const CheckpointTensor* t : all) {
    if (t->name.size() > 0xFFFF) {
      throw FormatError("tensor name too long: " + t->name.substr(0, 64));
    }
    if (t->dims.size() > 0xFF) throw FormatError("tensor rank too large");
    std::size_t count = 1;
    for (auto d : t->dims) count *= d;
    if (count != t->size()) {
      throw FormatError("tensor '" + t->name + "' dims do not match its values");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t->name.size()));
    w.bytes(t->name.data(), t->name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t->dtype()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t->dims.size()));
    for (auto d : t->dims) w.put<std::uint32_t>(d);
    std::visit(
        [&](const auto& v) { w.bytes(v.data(), v.size() * sizeof(v[0])); },
        t->values);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic (expected \"CNCT\")");
  }
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>("version");
  if (ckpt.version != Checkpoint::kVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(ckpt.version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto len = r.get<std::uint16_t>("name length");
    t.name.resize(len);
    r.bytes(t.name.data(), len, "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto rank = r.get<std::uint8_t>("rank");
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.get<std::uint32_t>("dims"));
      n *= t.dims.back();
      if (n > bytes.size()) throw FormatError("checkpoint truncated while reading values");
    }
    if (dtype == 0) {
      std::vector<float> v(n);
      r.bytes(v.data(), n * sizeof(float), "values");
      t.values = std::move(v);
    } else if (dtype == 1) {
      std::vector<double> v(n);
      r.bytes(v.data(), n * sizeof(double), "values");
      t.values = std::move(v);
    } else {
      throw FormatError("unknown dtype code " + std::to_string(dtype) +
                        " for tensor '" + t.name + "'");
    }
    if (t.name == kMetaStep || t.name == kMetaValAccuracy) {
      if (t.dtype() != DType::kFloat64 || t.size() != 1) {
        throw FormatError("malformed metadata tensor '" + t.name + "'");
      }
      const double v = std::get<1>(t.values)[0];
      if (t.name == kMetaStep) {
        ckpt.step = static_cast<std::uint64_t>(v);
      } else {
        ckpt.val_accuracy = v;
      }
      continue;
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint tensors");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
Checkpoint to_checkpoint(const Weights<T>& weights, std::uint64_t step,
                         std::optional<double> val_accuracy) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.val_accuracy = val_accuracy;
  for (const auto& e : weights.entries()) {
    ckpt.tensors.push_back({e.name, e.param.dims, e.param.values});
  }
  return ckpt;
}

template <typename T>
Weights<T> weights_from_checkpoint(const ArchitectureGraph& graph,
                                   const Checkpoint& ckpt) {
  Weights<T> expected = Weights<T>::zeros(graph);

  std::vector<std::string> unknown;
  for (const auto& t : ckpt.tensors) {
    if (!expected.find(t.name)) unknown.push_back(t.name);
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& n : unknown) list += (list.empty() ? "" : ", ") + n;
    throw CompatibilityError("checkpoint tensors absent from graph: " + list);
  }

  Weights<T> out;
  std::set<std::string> missing_nodes;
  for (const auto& e : expected.entries()) {
    const CheckpointTensor* t = ckpt.find(e.name);
    if (!t) {
      missing_nodes.insert(graph.node(e.node).name);
      continue;
    }
    if (t->dims != e.param.dims) {
      throw CompatibilityError("tensor '" + e.name + "' has the wrong shape");
    }
    typename Weights<T>::Entry copy = e;
    std::visit(
        [&](const auto& v) { copy.param.values.assign(v.begin(), v.end()); },
        t->values);
    out.add(std::move(copy));
  }
  if (!missing_nodes.empty()) {
    std::string list;
    for (const auto& n : missing_nodes) list += (list.empty() ? "" : ", ") + n;
    throw CompatibilityError("checkpoint has no weights for node(s): " + list);
  }
  return out;
}

template Checkpoint to_checkpoint(const Weights<float>&, std::uint64_t,
                                  std::optional<double>);
template Checkpoint to_checkpoint(const Weights<double>&, std::uint64_t,
                                  std::optional<double>);
template Weights<float> weights_from_checkpoint(const ArchitectureGraph&,
                                                const Checkpoint&);
template Weights<double> weights_from_checkpoint(const ArchitectureGraph&,
                                                 const Checkpoint&);

}  // namespace covidnet
