#include "cprompt/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cprompt/config.hpp"
#include "cprompt/digest.hpp"

namespace cprompt::harness {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'P', 'L', 'M'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in, std::size_t end) : in_(in), end_(end) {}
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > end_ - pos_) {
      throw TruncatedError(std::string("checkpoint truncated while reading ") + what);
    }
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8(const char* what) { return *take(1, what); }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    std::memcpy(&v, take(4, what), 4);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    std::memcpy(&v, take(8, what), 8);
    return v;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

TensorRecord TensorRecord::from_tensor(std::string name, const Tensor& t) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = DType::f32;
  r.dims = t.shape();
  r.payload.resize(t.numel() * sizeof(float));
  if (t.numel()) std::memcpy(r.payload.data(), t.data(), r.payload.size());
  return r;
}

Tensor TensorRecord::to_tensor() const {
  if (dtype != DType::f32) throw DataError("tensor '" + name + "' is not f32");
  if (payload.size() != shape_numel(dims) * sizeof(float)) {
    throw DataError("tensor '" + name + "' payload does not match its shape");
  }
  Tensor t(dims);
  if (t.numel()) std::memcpy(t.data(), payload.data(), payload.size());
  return t;
}

const TensorRecord& Container::find(const std::string& name) const {
  for (const auto& r : tensors)
    if (r.name == name) return r;
  throw DataError("checkpoint has no tensor named '" + name + "'");
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  nlohmann::json meta = c.metadata;
  meta["tensor_count"] = c.tensors.size();
  const std::string m = meta.dump();
  w.u64(m.size());
  w.bytes(m.data(), m.size());
  for (const auto& t : c.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (std::size_t d : t.dims) w.u64(d);
    w.u64(t.payload.size());
    w.bytes(t.payload.data(), t.payload.size());
  }
  Sha256 h;
  h.update(w.data().data(), w.data().size());
  const Digest d = h.finish();
  w.bytes(d.data(), d.size());
  return std::move(w.data());
}

Container decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    if (bytes.size() < 4 && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0) {
      throw TruncatedError("checkpoint truncated inside the magic bytes");
    }
    throw BadMagicError("not a checkpoint: bad magic bytes");
  }
  if (bytes.size() < 4 + 4 + 8 + 32) throw TruncatedError("checkpoint truncated inside the header");
  const std::size_t body_end = bytes.size() - 32;
  Reader r(bytes, body_end);
  r.take(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw BadVersionError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t meta_len = r.u64("metadata length");
  const std::uint8_t* meta = r.take(meta_len, "metadata");
  Container c;
  while (r.remaining() > 0) {
    TensorRecord t;
    const std::uint32_t name_len = r.u32("tensor name length");
    const std::uint8_t* name = r.take(name_len, "tensor name");
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype > 2) throw CorruptionError("tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const std::uint8_t rank = r.u8("rank");
    for (std::uint8_t i = 0; i < rank; ++i) t.dims.push_back(r.u64("dims"));
    const std::uint64_t n = r.u64("payload length");
    const std::uint8_t* p = r.take(n, "payload");
    t.payload.assign(p, p + n);
    c.tensors.push_back(std::move(t));
  }

  Sha256 h;
  h.update(bytes.data(), body_end);
  const Digest expect = h.finish();
  if (std::memcmp(expect.data(), bytes.data() + body_end, 32) != 0) {
    throw DigestMismatchError("checkpoint content digest mismatch");
  }
  try {
    c.metadata = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const std::size_t count = c.metadata.value("tensor_count", c.tensors.size());
  if (count != c.tensors.size()) {
    throw TruncatedError("checkpoint holds " + std::to_string(c.tensors.size()) + " of " +
                         std::to_string(count) + " tensors");
  }
  c.metadata.erase("tensor_count");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FilesystemError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FilesystemError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FilesystemError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FilesystemError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

namespace {

void expect_kind(const Container& c, const std::string& kind, const std::filesystem::path& path) {
  const std::string got = c.metadata.value("kind", std::string());
  if (got != kind) {
    throw CompatibilityError(path.string() + " holds a '" + got + "' checkpoint, expected '" + kind + "'");
  }
}

void assign_tensor(Tensor& dst, const TensorRecord& rec) {
  Tensor t = rec.to_tensor();
  if (t.shape() != dst.shape()) {
    throw ShapeError("tensor '" + rec.name + "' has shape " + shape_string(t.shape()) + ", expected " +
                     shape_string(dst.shape()));
  }
  dst = std::move(t);
}

TensorRecord raw_record(std::string name, DType dtype, Shape dims, std::vector<std::uint8_t> payload) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = dtype;
  r.dims = std::move(dims);
  r.payload = std::move(payload);
  return r;
}

bool is_linear(const std::string& name) {
  for (const char* role : model::kLinearRoles) {
    const std::string suffix = std::string(".") + role;
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0 &&
        name.rfind("layers.", 0) == 0) {
      return true;
    }
  }
  return false;
}

}  // namespace

void save_model(const std::filesystem::path& path, const model::ModelWeights& w,
                const nlohmann::json& extra) {
  Container c;
  c.metadata = {{"kind", "model"}, {"model", to_json(w.config)}, {"extra", extra}};
  w.for_each([&](const std::string& name, const Tensor& t) {
    c.tensors.push_back(TensorRecord::from_tensor(name, t));
  });
  write_container(path, c);
}

model::ModelWeights load_model(const std::filesystem::path& path, nlohmann::json* extra) {
  const Container c = read_container(path);
  expect_kind(c, "model", path);
  model::ModelWeights w = model::init_model(model_config_from_json(c.metadata.at("model")));
  w.for_each([&](const std::string& name, Tensor& t) { assign_tensor(t, c.find(name)); });
  if (extra) *extra = c.metadata.value("extra", nlohmann::json::object());
  return w;
}

void save_compressed(const std::filesystem::path& path, const compress::CompressedModel& m,
                     const nlohmann::json& extra) {
  Container c;
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [name, cl] : m.layers()) {
    nlohmann::json l{{"rows", cl.rows}, {"cols", cl.cols}, {"fingerprint", cl.fingerprint}};
    if (cl.quant) {
      l["bits"] = cl.quant->bits;
      l["group_size"] = cl.quant->group_size;
    }
    layers[name] = l;
  }
  c.metadata = {{"kind", "compressed-model"},
                {"model", to_json(m.config())},
                {"compression", to_json(m.spec())},
                {"label", m.spec().label()},
                {"fingerprint", m.fingerprint()},
                {"layers", layers},
                {"extra", extra}};
  m.dense().for_each([&](const std::string& name, const Tensor& t) {
    if (!is_linear(name)) c.tensors.push_back(TensorRecord::from_tensor(name, t));
  });
  for (const auto& [name, cl] : m.layers()) {
    if (cl.values) c.tensors.push_back(TensorRecord::from_tensor(name + ".values", *cl.values));
    if (cl.mask) c.tensors.push_back(raw_record(name + ".mask", DType::bitmask, {cl.rows, cl.cols}, *cl.mask));
    if (cl.quant) {
      const auto& q = *cl.quant;
      c.tensors.push_back(raw_record(name + ".codes", DType::packed_uint, {cl.rows, cl.cols}, q.codes));
      Tensor scales = Tensor::matrix(cl.rows, q.groups_per_row);
      std::copy(q.scales.begin(), q.scales.end(), scales.data());
      c.tensors.push_back(TensorRecord::from_tensor(name + ".scales", scales));
      c.tensors.push_back(
          raw_record(name + ".zero_points", DType::packed_uint, {cl.rows, q.groups_per_row}, q.zero_points));
    }
  }
  write_container(path, c);
}

compress::CompressedModel load_compressed(const std::filesystem::path& path, nlohmann::json* extra) {
  const Container c = read_container(path);
  expect_kind(c, "compressed-model", path);
  model::ModelWeights w = model::init_model(model_config_from_json(c.metadata.at("model")));
  w.for_each([&](const std::string& name, Tensor& t) {
    if (!is_linear(name)) assign_tensor(t, c.find(name));
  });
  const auto has = [&](const std::string& n) {
    for (const auto& r : c.tensors)
      if (r.name == n) return true;
    return false;
  };
  std::map<std::string, compress::CompressedLinear> layers;
  for (const auto& [name, meta] : c.metadata.at("layers").items()) {
    compress::CompressedLinear cl;
    cl.rows = meta.at("rows").get<std::size_t>();
    cl.cols = meta.at("cols").get<std::size_t>();
    if (has(name + ".values")) cl.values = c.find(name + ".values").to_tensor();
    if (has(name + ".mask")) cl.mask = c.find(name + ".mask").payload;
    if (has(name + ".codes")) {
      compress::QuantPayload q;
      q.bits = meta.at("bits").get<int>();
      q.group_size = meta.at("group_size").get<std::size_t>();
      q.groups_per_row = (cl.cols + q.group_size - 1) / q.group_size;
      q.codes = c.find(name + ".codes").payload;
      const Tensor scales = c.find(name + ".scales").to_tensor();
      q.scales.assign(scales.values().begin(), scales.values().end());
      q.zero_points = c.find(name + ".zero_points").payload;
      if (q.codes.size() != cl.rows * q.row_bytes(cl.cols) || q.scales.size() != cl.rows * q.groups_per_row ||
          q.zero_points.size() != cl.rows * q.groups_per_row) {
        throw CorruptionError("layer '" + name + "' quantisation payload has the wrong size");
      }
      cl.quant = std::move(q);
    }
    if (cl.mask && cl.mask->size() != cl.rows * cl.mask_row_bytes()) {
      throw CorruptionError("layer '" + name + "' mask has the wrong size");
    }
    cl.seal();
    if (cl.fingerprint != meta.at("fingerprint").get<std::string>()) {
      throw DigestMismatchError("layer '" + name + "' fingerprint mismatch");
    }
    layers.emplace(name, std::move(cl));
  }
  compress::CompressedModel m(std::move(w), std::move(layers), spec_from_json(c.metadata.at("compression")));
  if (m.fingerprint() != c.metadata.at("fingerprint").get<std::string>()) {
    throw DigestMismatchError("compressed model fingerprint mismatch in " + path.string());
  }
  if (extra) *extra = c.metadata.value("extra", nlohmann::json::object());
  return m;
}

void save_prompt(const std::filesystem::path& path, const prompt::SoftPrompt& p,
                 const prompt::TrainHistory* history, const nlohmann::json& extra) {
  Container c;
  const auto& pv = p.provenance;
  c.metadata = {{"kind", "prompt"},
                {"provenance",
                 {{"source_fingerprint", pv.source_fingerprint},
                  {"source_spec", pv.source_spec},
                  {"corpus_id", pv.corpus_id},
                  {"config_digest", pv.config_digest},
                  {"kind", prompt::kind_name(pv.kind)}}},
                {"extra", extra}};
  if (history) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& h : history->points) {
      pts.push_back({{"step", h.step},
                     {"train_nll", std::isfinite(h.train_nll) ? nlohmann::json(h.train_nll) : nlohmann::json()},
                     {"validation_ppl", h.validation_ppl}});
    }
    c.metadata["history"] = {{"points", pts}, {"best", history->best}};
  }
  c.tensors.push_back(TensorRecord::from_tensor("prompt.E", p.E));
  write_container(path, c);
}

prompt::SoftPrompt load_prompt(const std::filesystem::path& path, prompt::TrainHistory* history,
                               nlohmann::json* extra) {
  const Container c = read_container(path);
  expect_kind(c, "prompt", path);
  prompt::SoftPrompt p;
  p.E = c.find("prompt.E").to_tensor();
  const auto& pv = c.metadata.at("provenance");
  p.provenance.source_fingerprint = pv.at("source_fingerprint").get<std::string>();
  p.provenance.source_spec = pv.at("source_spec").get<std::string>();
  p.provenance.corpus_id = pv.at("corpus_id").get<std::string>();
  p.provenance.config_digest = pv.at("config_digest").get<std::string>();
  p.provenance.kind = prompt::parse_kind(pv.at("kind").get<std::string>());
  if (history) {
    *history = {};
    if (c.metadata.contains("history")) {
      const auto& h = c.metadata.at("history");
      for (const auto& pt : h.at("points")) {
        prompt::HistoryPoint hp;
        hp.step = pt.at("step").get<std::size_t>();
        hp.train_nll = pt.at("train_nll").is_null() ? std::nan("") : pt.at("train_nll").get<double>();
        hp.validation_ppl = pt.at("validation_ppl").get<double>();
        history->points.push_back(hp);
      }
      history->best = h.at("best").get<std::size_t>();
    }
  }
  if (extra) *extra = c.metadata.value("extra", nlohmann::json::object());
  return p;
}

std::string checkpoint_kind(const std::filesystem::path& path) {
  return read_container(path).metadata.value("kind", std::string());
}

}  // namespace cprompt::harness
