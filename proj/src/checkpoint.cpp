#include "uora/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "uora/errors.hpp"

namespace uora {

namespace {

constexpr char kMagic[8] = {'U', 'O', 'R', 'A', 'C', 'K', 'P', 'T'};

constexpr std::uint32_t fourcc(const char (&s)[5]) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[3])) << 24;
}

constexpr std::uint32_t kTagHeader = fourcc("LHDR");
constexpr std::uint32_t kTagVectors = fourcc("VECS");
constexpr std::uint32_t kTagReinit = fourcc("RCFG");
constexpr std::uint32_t kTagMatrices = fourcc("MATS");
constexpr std::uint32_t kTagEvents = fourcc("EVTS");
constexpr std::uint32_t kTagChecksums = fourcc("CSUM");

std::string tag_name(std::uint32_t tag) {
  std::string s(4, ' ');
  for (int i = 0; i < 4; ++i) s[i] = static_cast<char>((tag >> (8 * i)) & 0xFF);
  return s;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void doubles(std::span<const double> v) {
    for (double d : v) f64(d);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string section)
      : data_(data), section_(std::move(section)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(get(8)); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles(std::size_t n) {
    if (n > remaining() / 8) fail("declares more values than it holds");
    std::vector<double> out(n);
    for (auto& d : out) d = f64();
    return out;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  std::span<const std::uint8_t> since(std::size_t start) const {
    return data_.subspan(start, pos_ - start);
  }
  void expect_end() {
    if (remaining() != 0) fail("has " + std::to_string(remaining()) + " trailing bytes");
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw DecodeError("checkpoint section " + section_ + ": " + why);
  }

 private:
  void need(std::size_t n) {
    if (remaining() < n) fail("truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::string section_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv_bytes(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_section(Writer& out, std::uint32_t tag, Writer& payload) {
  out.u32(tag);
  out.u64(payload.buffer().size());
  out.bytes(payload.buffer());
}

std::uint8_t method_code(Method m) { return static_cast<std::uint8_t>(m); }

Method method_from(std::uint8_t code, const Reader& r) {
  if (code > static_cast<std::uint8_t>(Method::Uora)) r.fail("unknown method code");
  return static_cast<Method>(code);
}

InitFamily family_from(std::uint8_t code, const Reader& r) {
  if (code > static_cast<std::uint8_t>(InitFamily::RandomUniform)) {
    r.fail("unknown init family code");
  }
  return static_cast<InitFamily>(code);
}

// One layer as it sits in the file, before reconstruction.
struct RawLayer {
  std::uint32_t layer_id = 0;
  std::string name;
  Method method = Method::None;
  std::uint64_t d_out = 0, d_in = 0, rank = 0;
  std::vector<double> vec_a, vec_b;  // d/b for UORA, A/B for LoRA
  InitRecipe recipe;
  std::optional<std::uint64_t> shared_handle;
  ReinitConfig reinit;
  std::uint64_t reinit_seed = 0, reinit_stream = 0, reinit_cursor = 0;
  std::vector<std::uint32_t> counters;
  std::vector<double> mat_a, mat_b;  // FULL-mode UORA matrices
  std::vector<ReinitEvent> events;
  std::uint64_t sum_a = 0, sum_b = 0, sum_vec = 0;
  bool bytes_intact = true;
};

struct RawCheckpoint {
  CheckpointMode mode = CheckpointMode::Full;
  std::vector<RawLayer> layers;
};

bool is_uora(Method m) { return m == Method::Uora || m == Method::Vera; }

Reader open_section(Reader& file, std::uint32_t want, std::size_t layer_index) {
  const std::string where =
      tag_name(want) + " (layer " + std::to_string(layer_index) + ")";
  if (file.remaining() < 12) {
    throw DecodeError("checkpoint section " + where + ": truncated before header");
  }
  const std::uint32_t tag = file.u32();
  if (tag != want) {
    throw DecodeError("checkpoint section " + where + ": found tag '" + tag_name(tag) +
                      "'");
  }
  const std::uint64_t len = file.u64();
  if (len > file.remaining()) {
    throw DecodeError("checkpoint section " + where + ": truncated payload");
  }
  return Reader(file.bytes(static_cast<std::size_t>(len)), where);
}

RawCheckpoint parse(std::span<const std::uint8_t> bytes) {
  Reader file(bytes, "file header");
  auto magic = file.bytes(sizeof kMagic);
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) file.fail("bad magic");
  const std::uint32_t version = file.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  RawCheckpoint raw;
  const std::uint8_t mode = file.u8();
  if (mode > 1) file.fail("unknown mode");
  raw.mode = static_cast<CheckpointMode>(mode);
  file.bytes(3);
  const std::uint32_t n_layers = file.u32();

  for (std::uint32_t li = 0; li < n_layers; ++li) {
    RawLayer L;
    const std::size_t layer_start = file.position();
    {
      Reader r = open_section(file, kTagHeader, li);
      L.layer_id = r.u32();
      const std::uint16_t name_len = r.u16();
      auto name = r.bytes(name_len);
      L.name.assign(name.begin(), name.end());
      L.method = method_from(r.u8(), r);
      L.d_out = r.u64();
      L.d_in = r.u64();
      L.rank = r.u64();
      r.expect_end();
      if (L.method == Method::None) r.fail("layer without adapter");
      if (L.rank == 0 || L.rank > std::min(L.d_out, L.d_in)) r.fail("invalid rank");
    }
    {
      Reader r = open_section(file, kTagVectors, li);
      if (is_uora(L.method)) {
        L.vec_a = r.doubles(L.rank);
        L.vec_b = r.doubles(L.d_out);
      } else {
        L.vec_a = r.doubles(L.rank * L.d_in);
        L.vec_b = r.doubles(L.d_out * L.rank);
      }
      r.expect_end();
    }
    if (is_uora(L.method)) {
      {
        Reader r = open_section(file, kTagReinit, li);
        L.recipe.kind.family = family_from(r.u8(), r);
        L.recipe.kind.gain = r.f64();
        L.recipe.seed = r.u64();
        L.recipe.stream = r.u64();
        if (r.u8() != 0) L.shared_handle = r.u64();
        else r.u64();
        L.reinit.tau = r.f64();
        L.reinit.count_k = r.u32();
        L.reinit.alpha = r.f64();
        L.reinit.rand_kind.family = family_from(r.u8(), r);
        L.reinit.rand_kind.gain = r.f64();
        L.reinit.start_step = r.i64();
        L.reinit.cadence = r.u8() ? ReinitCadence::Epoch : ReinitCadence::Step;
        L.reinit.reset_moments = r.u8() != 0;
        L.reinit_seed = r.u64();
        L.reinit_stream = r.u64();
        L.reinit_cursor = r.u64();
        try {
          validate(L.reinit);
          validate(L.recipe.kind);
          validate(L.reinit.rand_kind);
        } catch (const ConfigError& e) {
          r.fail(e.what());
        }
        const std::uint32_t n = r.u32();
        if (n != L.rank) r.fail("counter count does not match rank");
        L.counters.resize(n);
        for (auto& c : L.counters) c = r.u32();
        r.expect_end();
      }
      if (raw.mode == CheckpointMode::Full) {
        Reader r = open_section(file, kTagMatrices, li);
        L.mat_a = r.doubles(L.rank * L.d_in);
        L.mat_b = r.doubles(L.d_out * L.rank);
        r.expect_end();
      }
      {
        Reader r = open_section(file, kTagEvents, li);
        const std::uint32_t n = r.u32();
        if (n > r.remaining() / 33) r.fail("declares more events than it holds");
        L.events.resize(n);
        for (auto& e : L.events) {
          e.step = r.i64();
          e.dim = r.u32();
          e.layer_id = r.u32();
          const std::uint8_t t = r.u8();
          if (t > 1) r.fail("unknown event target");
          e.target = static_cast<ReinitTarget>(t);
          e.rng_cursor = r.u64();
          e.digest = r.u64();
        }
        r.expect_end();
      }
    }
    {
      const std::uint64_t layer_sum = fnv_bytes(file.since(layer_start));
      Reader r = open_section(file, kTagChecksums, li);
      L.sum_a = r.u64();
      L.sum_b = r.u64();
      L.sum_vec = r.u64();
      L.bytes_intact = r.u64() == layer_sum;
      r.expect_end();
    }
    raw.layers.push_back(std::move(L));
  }
  file.expect_end();
  return raw;
}

Matrix matrix_from(std::size_t rows, std::size_t cols, const std::vector<double>& v) {
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.values().begin());
  return m;
}

struct Rebuilt {
  LayerCheckpoint layer;
  LayerVerdict verdict;
};

Rebuilt rebuild(const RawLayer& L, CheckpointMode mode) {
  Rebuilt out;
  out.verdict.layer_id = L.layer_id;
  out.verdict.name = L.name;
  out.layer.layer_id = L.layer_id;
  out.layer.name = L.name;
  if (!L.bytes_intact) {
    // Nothing in this layer can be trusted, including the shapes.
    out.verdict.pass = false;
    out.verdict.detail = "layer bytes checksum mismatch";
    return out;
  }
  std::vector<double> vecs = L.vec_a;
  vecs.insert(vecs.end(), L.vec_b.begin(), L.vec_b.end());
  if (checksum(vecs) != L.sum_vec) {
    out.verdict.pass = false;
    out.verdict.detail = "trainable vector checksum mismatch";
  }

  if (!is_uora(L.method)) {
    LoraState s;
    s.a = matrix_from(L.rank, L.d_in, L.vec_a);
    s.b = matrix_from(L.d_out, L.rank, L.vec_b);
    if (out.verdict.pass &&
        (checksum(s.a.values()) != L.sum_a || checksum(s.b.values()) != L.sum_b)) {
      out.verdict.pass = false;
      out.verdict.detail = "LoRA factor checksum mismatch";
    }
    out.layer.state = std::move(s);
    return out;
  }

  UoraState s;
  s.label = L.method;
  s.d_vec = Vector(L.vec_a);
  s.b_vec = Vector(L.vec_b);
  s.recipe = L.recipe;
  s.shared_handle = L.shared_handle;

  ReinitMonitor monitor(L.layer_id, L.rank, L.reinit, L.reinit_seed, L.reinit_stream);
  monitor.restore(L.counters, L.events, L.reinit_cursor);

  if (mode == CheckpointMode::Full) {
    s.a = std::make_shared<Matrix>(matrix_from(L.rank, L.d_in, L.mat_a));
    s.b = std::make_shared<Matrix>(matrix_from(L.d_out, L.rank, L.mat_b));
  } else {
    // Seed shape for replay_events, which regenerates A and B from the recipe.
    s.a = std::make_shared<Matrix>(L.rank, L.d_in);
    s.b = std::make_shared<Matrix>(L.d_out, L.rank);
    const ReplayOutcome outcome =
        replay_events(s, L.events, L.reinit, L.reinit_seed, L.reinit_stream);
    out.verdict.replayed = true;
    if (out.verdict.pass && !outcome.ok) {
      out.verdict.pass = false;
      out.verdict.detail = outcome.message;
    }
    if (L.events.empty()) s.shared_handle = L.shared_handle;
  }
  if (out.verdict.pass &&
      (checksum(s.a->values()) != L.sum_a || checksum(s.b->values()) != L.sum_b)) {
    out.verdict.pass = false;
    out.verdict.detail = "frozen matrix checksum mismatch";
  }
  if (out.verdict.pass) {
    out.verdict.detail = out.verdict.replayed
                             ? "replayed " + std::to_string(L.events.size()) + " events"
                             : "checksums verified";
  }
  out.layer.state = std::move(s);
  out.layer.monitor = std::move(monitor);
  return out;
}

// Layers that were still sharing matrices when saved point at one copy again.
void relink_shared(std::vector<LayerCheckpoint>& layers) {
  std::map<std::uint64_t, std::pair<std::shared_ptr<const Matrix>,
                                    std::shared_ptr<const Matrix>>> seen;
  for (auto& L : layers) {
    auto* s = std::get_if<UoraState>(&L.state);
    if (!s || !s->shared_handle) continue;
    auto [it, inserted] = seen.try_emplace(*s->shared_handle, s->a, s->b);
    if (!inserted && *it->second.first == *s->a && *it->second.second == *s->b) {
      s->a = it->second.first;
      s->b = it->second.second;
    }
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<LayerCheckpoint>& layers,
                                            CheckpointMode mode) {
  Writer out;
  out.bytes({reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic});
  out.u32(kCheckpointVersion);
  out.u8(static_cast<std::uint8_t>(mode));
  out.u8(0);
  out.u8(0);
  out.u8(0);
  out.u32(static_cast<std::uint32_t>(layers.size()));

  for (const auto& L : layers) {
    const std::size_t layer_start = out.buffer().size();
    const auto* lora = std::get_if<LoraState>(&L.state);
    const auto* uora = std::get_if<UoraState>(&L.state);
    if (L.name.size() > 0xFFFF) throw ConfigError("layer name too long");

    Writer hdr;
    hdr.u32(L.layer_id);
    hdr.u16(static_cast<std::uint16_t>(L.name.size()));
    hdr.bytes({reinterpret_cast<const std::uint8_t*>(L.name.data()), L.name.size()});
    if (lora) {
      hdr.u8(method_code(Method::Lora));
      hdr.u64(lora->b.rows());
      hdr.u64(lora->a.cols());
      hdr.u64(lora->rank());
    } else {
      hdr.u8(method_code(uora->label));
      hdr.u64(uora->d_out());
      hdr.u64(uora->d_in());
      hdr.u64(uora->rank());
    }
    write_section(out, kTagHeader, hdr);

    Writer vecs;
    if (lora) {
      vecs.doubles(lora->a.values());
      vecs.doubles(lora->b.values());
    } else {
      vecs.doubles(uora->d_vec.values());
      vecs.doubles(uora->b_vec.values());
    }
    write_section(out, kTagVectors, vecs);

    if (uora) {
      if (!L.monitor) throw ConfigError("UORA layer '" + L.name + "' has no monitor");
      const ReinitMonitor& m = *L.monitor;
      const ReinitConfig& c = m.config();
      Writer rc;
      rc.u8(static_cast<std::uint8_t>(uora->recipe.kind.family));
      rc.f64(uora->recipe.kind.gain);
      rc.u64(uora->recipe.seed);
      rc.u64(uora->recipe.stream);
      rc.u8(uora->shared_handle ? 1 : 0);
      rc.u64(uora->shared_handle.value_or(0));
      rc.f64(c.tau);
      rc.u32(c.count_k);
      rc.f64(c.alpha);
      rc.u8(static_cast<std::uint8_t>(c.rand_kind.family));
      rc.f64(c.rand_kind.gain);
      rc.i64(c.start_step);
      rc.u8(c.cadence == ReinitCadence::Epoch ? 1 : 0);
      rc.u8(c.reset_moments ? 1 : 0);
      rc.u64(m.rng().seed());
      rc.u64(m.rng().stream_id());
      rc.u64(m.rng().cursor());
      rc.u32(static_cast<std::uint32_t>(m.counters().size()));
      for (auto v : m.counters()) rc.u32(v);
      write_section(out, kTagReinit, rc);

      if (mode == CheckpointMode::Full) {
        Writer mats;
        mats.doubles(uora->a->values());
        mats.doubles(uora->b->values());
        write_section(out, kTagMatrices, mats);
      }

      Writer ev;
      ev.u32(static_cast<std::uint32_t>(m.events().size()));
      for (const auto& e : m.events()) {
        ev.i64(e.step);
        ev.u32(e.dim);
        ev.u32(e.layer_id);
        ev.u8(static_cast<std::uint8_t>(e.target));
        ev.u64(e.rng_cursor);
        ev.u64(e.digest);
      }
      write_section(out, kTagEvents, ev);
    }

    Writer sums;
    if (lora) {
      sums.u64(checksum(lora->a.values()));
      sums.u64(checksum(lora->b.values()));
    } else {
      sums.u64(checksum(uora->a->values()));
      sums.u64(checksum(uora->b->values()));
    }
    std::vector<double> flat;
    for (auto part : lora ? std::array{lora->a.values(), lora->b.values()}
                          : std::array{uora->d_vec.values(), uora->b_vec.values()}) {
      flat.insert(flat.end(), part.begin(), part.end());
    }
    sums.u64(checksum(flat));
    sums.u64(fnv_bytes(std::span<const std::uint8_t>(out.buffer()).subspan(layer_start)));
    write_section(out, kTagChecksums, sums);
  }
  return std::move(out.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const RawCheckpoint raw = parse(bytes);
  Checkpoint ck;
  ck.mode = raw.mode;
  for (const auto& L : raw.layers) {
    Rebuilt r = rebuild(L, raw.mode);
    if (!r.verdict.pass) {
      throw Error(ErrorKind::Checksum, "layer " + std::to_string(L.layer_id) + " (" +
                                           L.name + "): " + r.verdict.detail);
    }
    ck.layers.push_back(std::move(r.layer));
  }
  relink_shared(ck.layers);
  return ck;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void save_checkpoint(const std::vector<LayerCheckpoint>& layers,
                     const std::filesystem::path& path, CheckpointMode mode) {
  const auto bytes = encode_checkpoint(layers, mode);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_checkpoint(bytes);
}

bool VerifyReport::all_pass() const {
  for (const auto& l : layers)
    if (!l.pass) return false;
  return true;
}

VerifyReport verify_checkpoint(std::span<const std::uint8_t> bytes) {
  const RawCheckpoint raw = parse(bytes);
  VerifyReport rep;
  rep.mode = raw.mode;
  for (const auto& L : raw.layers) rep.layers.push_back(rebuild(L, raw.mode).verdict);
  return rep;
}

VerifyReport verify_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return verify_checkpoint(std::span<const std::uint8_t>(bytes));
}

}  // namespace uora
