#include "llamba/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace llamba {

namespace {

constexpr std::size_t kAlign = 64;
constexpr std::uint8_t kTagF32 = 0, kTagF64 = 1, kTagQ4 = 2;

std::size_t align_up(std::size_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// --- little-endian byte writer -------------------------------------------

struct Writer {
  std::string bytes;

  void raw(const void* p, std::size_t n) {
    bytes.append(static_cast<const char*>(p), n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
  }
  void pad_to(std::size_t off) {
    if (bytes.size() > off) throw FormatError("internal: writer overran offset");
    bytes.resize(off, '\0');
  }
};

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string context;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw FormatError("truncated file" + (context.empty() ? "" : " in " + context));
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() {
    std::uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    std::uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes.data() + pos, n);
    pos += n;
    return s;
  }
};

struct TableEntry {
  std::string name;
  std::uint8_t tag;
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  std::size_t payload_bytes = 0;
};

std::size_t numel(const std::vector<std::size_t>& extents) {
  std::size_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

std::size_t q4_payload_bytes(const std::vector<std::size_t>& extents) {
  std::size_t n = numel(extents);
  std::size_t inner = extents.back();
  std::size_t gpr = (inner + kLmbaGroupSize - 1) / kLmbaGroupSize;
  std::size_t groups = n / inner * gpr;
  return groups * 5 + (n + 1) / 2;  // f32 scale + u8 zero per group, packed codes
}

std::size_t payload_bytes_for(std::uint8_t tag, const std::vector<std::size_t>& extents) {
  switch (tag) {
    case kTagF32: return numel(extents) * 4;
    case kTagF64: return numel(extents) * 8;
    case kTagQ4: return q4_payload_bytes(extents);
    default: throw FormatError("unknown dtype tag " + std::to_string(tag));
  }
}

}  // namespace

bool ModelBundle::quantized() const { return !qtensors.empty(); }

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("malformed header line (missing '='): " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string render_kv_text(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw FormatError("header key/value may not contain '=' or newline: " + k);
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

void save_bundle(const ModelBundle& b, const std::string& path) {
  std::vector<TableEntry> table;
  for (const auto& [name, t] : b.tensors) {
    if (b.qtensors.count(name))
      throw FormatError("tensor '" + name + "' present both dense and quantized");
    TableEntry e{name, t.dtype() == DType::F32 ? kTagF32 : kTagF64, t.shape(), 0, 0};
    e.payload_bytes = payload_bytes_for(e.tag, e.extents);
    table.push_back(std::move(e));
  }
  for (const auto& [name, q] : b.qtensors) {
    if (q.group_size != kLmbaGroupSize)
      throw FormatError("tensor '" + name + "': file format requires group size " +
                        std::to_string(kLmbaGroupSize));
    TableEntry e{name, kTagQ4, q.shape, 0, 0};
    e.payload_bytes = payload_bytes_for(e.tag, e.extents);
    table.push_back(std::move(e));
  }
  // both maps are name-sorted; merge keeps the table sorted and offsets increasing
  std::sort(table.begin(), table.end(),
            [](const TableEntry& a, const TableEntry& b2) { return a.name < b2.name; });

  std::string header_text = render_kv_text(b.header);
  std::size_t table_bytes = 4;  // tensor count
  for (const auto& e : table) table_bytes += 4 + e.name.size() + 1 + 4 + 8 * e.extents.size() + 8;

  std::size_t off = align_up(4 + 4 + 8 + header_text.size() + table_bytes);
  for (auto& e : table) {
    e.offset = off;
    off = align_up(off + e.payload_bytes);
  }

  Writer w;
  w.raw("LMBA", 4);
  w.u32(kLmbaVersion);
  w.u64(header_text.size());
  w.raw(header_text.data(), header_text.size());
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& e : table) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.u8(e.tag);
    w.u32(static_cast<std::uint32_t>(e.extents.size()));
    for (auto x : e.extents) w.u64(x);
    w.u64(e.offset);
  }
  for (const auto& e : table) {
    w.pad_to(e.offset);
    if (e.tag == kTagQ4) {
      const QuantTensor& q = b.qtensors.at(e.name);
      for (float s : q.scales) w.f32(s);
      for (std::uint8_t z : q.zeros) w.u8(z);
      w.raw(q.codes.data(), q.codes.size());
    } else {
      const Tensor& t = b.tensors.at(e.name);
      if (e.tag == kTagF32)
        for (std::size_t i = 0; i < t.size(); ++i) w.f32(static_cast<float>(t.get(i)));
      else
        for (std::size_t i = 0; i < t.size(); ++i) w.f64(t.get(i));
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw FormatError("write failed: " + path);
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader r{bytes, 0, "file preamble"};
  if (r.str(4) != "LMBA") throw FormatError("bad magic (not an LMBA file): " + path);
  std::uint32_t version = r.u32();
  if (version != kLmbaVersion)
    throw FormatError("unsupported format version " + std::to_string(version) + " (expected " +
                      std::to_string(kLmbaVersion) + ")");
  std::uint64_t header_len = r.u64();
  r.context = "header";
  ModelBundle b;
  b.header = parse_kv_text(r.str(header_len));

  r.context = "tensor table";
  std::uint32_t count = r.u32();
  std::vector<TableEntry> table;
  std::size_t prev_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    TableEntry e;
    e.name = r.str(r.u32());
    r.context = "tensor table entry '" + e.name + "'";
    e.tag = r.u8();
    if (e.tag > kTagQ4)
      throw FormatError("unknown dtype tag " + std::to_string(e.tag) + " for tensor '" +
                        e.name + "'");
    std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8)
      throw FormatError("bad rank for tensor '" + e.name + "'");
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t x = r.u64();
      if (x == 0) throw FormatError("zero extent in tensor '" + e.name + "'");
      e.extents.push_back(x);
    }
    e.offset = r.u64();
    if (e.offset % kAlign != 0)
      throw FormatError("misaligned payload offset for tensor '" + e.name + "'");
    if (!table.empty() && e.offset <= prev_offset)
      throw FormatError("payload offsets not strictly increasing at tensor '" + e.name + "'");
    prev_offset = e.offset;
    e.payload_bytes = payload_bytes_for(e.tag, e.extents);
    table.push_back(std::move(e));
  }
  if (r.pos > (table.empty() ? bytes.size() : table.front().offset))
    throw FormatError("tensor table overlaps payloads");

  std::size_t expected_end = table.empty() ? align_up(r.pos) : 0;
  for (const auto& e : table) {
    if (e.offset + e.payload_bytes > bytes.size())
      throw FormatError("truncated payload for tensor '" + e.name + "'");
    expected_end = e.offset + e.payload_bytes;
    Reader pr{bytes, e.offset, "payload of '" + e.name + "'"};
    if (e.tag == kTagQ4) {
      QuantTensor q;
      q.shape = e.extents;
      q.group_size = kLmbaGroupSize;
      std::size_t n = numel(e.extents);
      std::size_t gpr = (e.extents.back() + kLmbaGroupSize - 1) / kLmbaGroupSize;
      std::size_t groups = n / e.extents.back() * gpr;
      q.scales.resize(groups);
      for (auto& s : q.scales) s = pr.f32();
      q.zeros.resize(groups);
      pr.raw(q.zeros.data(), groups);
      q.codes.resize((n + 1) / 2);
      pr.raw(q.codes.data(), q.codes.size());
      b.qtensors.emplace(e.name, std::move(q));
    } else {
      DType dt = e.tag == kTagF32 ? DType::F32 : DType::F64;
      Tensor t = Tensor::zeros(e.extents, dt);
      for (std::size_t i = 0; i < t.size(); ++i)
        t.set(i, dt == DType::F32 ? static_cast<double>(pr.f32()) : pr.f64());
      b.tensors.emplace(e.name, std::move(t));
    }
  }
  if (table.empty()) expected_end = r.pos;
  if (bytes.size() != expected_end)
    throw FormatError("trailing garbage: file has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected_end));
  return b;
}

// --- model views --------------------------------------------------------------

namespace {

void put_config(std::map<std::string, std::string>& h, const LlambaConfig& c, DType dt) {
  h["n_blocks"] = std::to_string(c.n_blocks);
  h["d_model"] = std::to_string(c.d_model);
  h["n_heads"] = std::to_string(c.n_heads);
  h["head_dim"] = std::to_string(c.head_dim);
  h["state_dim"] = std::to_string(c.state_dim);
  h["mlp_hidden"] = std::to_string(c.mlp_hidden);
  h["vocab"] = std::to_string(c.vocab);
  h["norm_eps"] = fmt_double(c.norm_eps);
  h["tie_embeddings"] = c.tie_embeddings ? "1" : "0";
  h["n_kv_heads"] = std::to_string(c.n_kv_heads);
  h["dtype"] = dtype_name(dt);
}

const std::string& need_key(const std::map<std::string, std::string>& h, const std::string& k) {
  auto it = h.find(k);
  if (it == h.end()) throw FormatError("missing header key: " + k);
  return it->second;
}

LlambaConfig get_config(const std::map<std::string, std::string>& h, DType* dt) {
  LlambaConfig c;
  c.n_blocks = std::stoi(need_key(h, "n_blocks"));
  c.d_model = std::stoi(need_key(h, "d_model"));
  c.n_heads = std::stoi(need_key(h, "n_heads"));
  c.head_dim = std::stoi(need_key(h, "head_dim"));
  c.state_dim = std::stoi(need_key(h, "state_dim"));
  c.mlp_hidden = std::stoi(need_key(h, "mlp_hidden"));
  c.vocab = std::stoi(need_key(h, "vocab"));
  c.norm_eps = std::stod(need_key(h, "norm_eps"));
  c.tie_embeddings = need_key(h, "tie_embeddings") == "1";
  c.n_kv_heads = std::stoi(need_key(h, "n_kv_heads"));
  std::string d = need_key(h, "dtype");
  if (d != "f32" && d != "f64") throw FormatError("bad dtype header value: " + d);
  *dt = d == "f32" ? DType::F32 : DType::F64;
  return c;
}

void fill_params(std::vector<NamedParam> params, const ModelBundle& b, DType dt,
                 const std::string& prefix = "") {
  for (auto& p : params) {
    std::string key = prefix + p.name;
    auto qit = b.qtensors.find(key);
    if (qit != b.qtensors.end()) {
      Tensor t = dequantize(qit->second, dt);
      if (!t.same_shape(*p.tensor))
        throw FormatError("tensor '" + key + "' has shape " + t.shape_str() + ", expected " +
                          p.tensor->shape_str());
      *p.tensor = std::move(t);
      continue;
    }
    auto it = b.tensors.find(key);
    if (it == b.tensors.end()) throw FormatError("missing tensor: " + key);
    if (!it->second.same_shape(*p.tensor))
      throw FormatError("tensor '" + key + "' has shape " + it->second.shape_str() +
                        ", expected " + p.tensor->shape_str());
    *p.tensor = it->second.cast(dt);
  }
}

}  // namespace

ModelBundle to_bundle(const Model& m) {
  ModelBundle b;
  put_config(b.header, m.cfg, m.embed.dtype());
  b.header["kind"] = "model";
  for (const auto& p : const_cast<Model&>(m).parameters()) b.tensors[p.name] = *p.tensor;
  return b;
}

Model model_from_bundle(const ModelBundle& b) {
  const std::string& kind = need_key(b.header, "kind");
  if (kind != "model" && kind != "checkpoint")
    throw FormatError("file holds a '" + kind + "', expected a model");
  DType dt;
  LlambaConfig cfg = get_config(b.header, &dt);
  Model m = init_student(cfg, 0, dt);
  fill_params(m.parameters(), b, dt);
  return m;
}

ModelBundle to_bundle(const Teacher& t) {
  ModelBundle b;
  put_config(b.header, t.cfg, t.embed.dtype());
  b.header["kind"] = "teacher";
  for (const auto& p : const_cast<Teacher&>(t).parameters()) b.tensors[p.name] = *p.tensor;
  return b;
}

Teacher teacher_from_bundle(const ModelBundle& b) {
  if (need_key(b.header, "kind") != "teacher")
    throw FormatError("file holds a '" + b.header.at("kind") + "', expected a teacher");
  DType dt;
  LlambaConfig cfg = get_config(b.header, &dt);
  Teacher t = init_teacher(cfg, 0, dt);
  fill_params(t.parameters(), b, dt);
  return t;
}

ModelBundle to_bundle(const Checkpoint& c) {
  ModelBundle b = to_bundle(c.model);
  b.header["kind"] = "checkpoint";
  b.header["stage"] = std::to_string(c.stage);
  b.header["next_step"] = std::to_string(c.next_step);
  b.header["opt_step_count"] = std::to_string(c.opt.step_count);
  for (const auto& [name, t] : c.opt.m) b.tensors["opt.m." + name] = t;
  for (const auto& [name, t] : c.opt.v) b.tensors["opt.v." + name] = t;
  return b;
}

Checkpoint checkpoint_from_bundle(const ModelBundle& b) {
  if (need_key(b.header, "kind") != "checkpoint")
    throw FormatError("file holds a '" + b.header.at("kind") + "', expected a checkpoint");
  Checkpoint c;
  c.model = model_from_bundle(b);
  c.stage = std::stoi(need_key(b.header, "stage"));
  c.next_step = std::stol(need_key(b.header, "next_step"));
  c.opt.step_count = std::stol(need_key(b.header, "opt_step_count"));
  for (const auto& [name, t] : b.tensors) {
    if (name.starts_with("opt.m.")) c.opt.m[name.substr(6)] = t;
    else if (name.starts_with("opt.v.")) c.opt.v[name.substr(6)] = t;
  }
  return c;
}

ModelBundle quantize_model_bundle(const ModelBundle& b) {
  if (b.quantized() || b.header.count("quantized"))
    throw ConfigError("model is already quantized");
  ModelBundle out;
  out.header = b.header;
  out.header["quantized"] = "1";
  for (const auto& [name, t] : b.tensors) {
    bool is_norm = name.find("norm") != std::string::npos;
    bool is_embed = name == "embed";
    bool is_opt = name.starts_with("opt.");
    if (t.rank() == 2 && t.shape().back() >= kLmbaGroupSize && !is_norm && !is_embed && !is_opt)
      out.qtensors[name] = quantize(t, kLmbaGroupSize, name);
    else
      out.tensors[name] = t;
  }
  return out;
}

void save_model(const Model& m, const std::string& path) { save_bundle(to_bundle(m), path); }
Model load_model(const std::string& path) { return model_from_bundle(load_bundle(path)); }
void save_teacher(const Teacher& t, const std::string& path) { save_bundle(to_bundle(t), path); }
Teacher load_teacher(const std::string& path) {
  return teacher_from_bundle(load_bundle(path));
}
void save_checkpoint(const Checkpoint& c, const std::string& path) {
  save_bundle(to_bundle(c), path);
}
Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_bundle(load_bundle(path));
}

std::size_t file_size(const std::string& path) {
  std::error_code ec;
  auto n = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot stat: " + path);
  return static_cast<std::size_t>(n);
}

}  // namespace llamba
