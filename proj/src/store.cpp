#include "refdiff/store.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace refdiff {

// ---------------------------------------------------------------------------
// Config registry
// ---------------------------------------------------------------------------

namespace {

struct KeyDef {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
    double v{};
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw config_error("expected a real number, got '" + s + "'");
    return v;
}

int parse_int(const std::string& s) {
    int v{};
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw config_error("expected an integer, got '" + s + "'");
    return v;
}

uint64_t parse_u64(const std::string& s) {
    uint64_t v{};
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw config_error("expected an unsigned integer, got '" + s + "'");
    return v;
}

std::string fmt_ilist(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::vector<int> parse_ilist(const std::string& s) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t next = s.find(',', pos);
        if (next == std::string::npos) next = s.size();
        out.push_back(parse_int(s.substr(pos, next - pos)));
        pos = next + 1;
    }
    if (out.empty()) throw config_error("expected a comma-separated integer list, got '" + s + "'");
    return out;
}

void apply_preset(RunConfig& c, const std::string& name) {
    if (name == "tiny") {
        c.image_size       = 32;
        c.base_channels    = 16;
        c.channel_mult     = {1, 2};
        c.attn_resolutions = {16, 8};
        c.t_subsample      = 5;
        c.batch_size       = 8;
        c.corpus_size      = 32;
    } else if (name == "base") {
        c.image_size       = 64;
        c.base_channels    = 32;
        c.channel_mult     = {1, 2, 4};
        c.attn_resolutions = {16, 8};
        c.t_subsample      = 1;
        c.batch_size       = 16;
        c.corpus_size      = 64;
    } else {
        throw config_error("unknown preset '" + name + "' (expected tiny|base)");
    }
    c.preset = name;
}

const std::vector<KeyDef>& registry() {
    static const std::vector<KeyDef> defs = [] {
        std::vector<KeyDef> d;
        auto add_int = [&](const char* n, int RunConfig::*f) {
            d.push_back({n, [f](const RunConfig& c) { return std::to_string(c.*f); },
                         [f](RunConfig& c, const std::string& v) { c.*f = parse_int(v); }});
        };
        auto add_real = [&](const char* n, double RunConfig::*f) {
            d.push_back({n, [f](const RunConfig& c) { return fmt_double(c.*f); },
                         [f](RunConfig& c, const std::string& v) { c.*f = parse_double(v); }});
        };
        auto add_str = [&](const char* n, std::string RunConfig::*f) {
            d.push_back({n, [f](const RunConfig& c) { return c.*f; },
                         [f](RunConfig& c, const std::string& v) { c.*f = v; }});
        };
        auto add_ilist = [&](const char* n, std::vector<int> RunConfig::*f) {
            d.push_back({n, [f](const RunConfig& c) { return fmt_ilist(c.*f); },
                         [f](RunConfig& c, const std::string& v) { c.*f = parse_ilist(v); }});
        };

        d.push_back({"preset", [](const RunConfig& c) { return c.preset; },
                     [](RunConfig& c, const std::string& v) { apply_preset(c, v); }});
        add_int("image_size", &RunConfig::image_size);
        add_int("base_channels", &RunConfig::base_channels);
        add_ilist("channel_mult", &RunConfig::channel_mult);
        add_ilist("attn_resolutions", &RunConfig::attn_resolutions);
        add_int("heads", &RunConfig::heads);
        add_int("token_dim", &RunConfig::token_dim);
        add_int("temb_dim", &RunConfig::temb_dim);
        add_int("label_vocab", &RunConfig::label_vocab);
        add_int("attr_dim", &RunConfig::attr_dim);
        add_int("caption_tokens", &RunConfig::caption_tokens);
        add_int("ref_tokens", &RunConfig::ref_tokens);
        add_int("latent_packing", &RunConfig::latent_packing);
        add_int("t_steps", &RunConfig::T);
        add_real("beta_start", &RunConfig::beta_start);
        add_real("beta_end", &RunConfig::beta_end);
        add_int("t_subsample", &RunConfig::t_subsample);
        add_int("ddim_steps", &RunConfig::ddim_steps);
        add_real("guidance_scale", &RunConfig::guidance_scale);
        add_real("eta", &RunConfig::eta);
        add_real("p_drop_all", &RunConfig::p_drop_all);
        add_real("p_drop_each", &RunConfig::p_drop_each);
        add_real("lr", &RunConfig::lr);
        add_int("batch_size", &RunConfig::batch_size);
        add_int("steps", &RunConfig::steps);
        add_int("ckpt_every", &RunConfig::ckpt_every);
        add_real("ema_decay", &RunConfig::ema_decay);
        add_int("max_refs", &RunConfig::max_refs);
        add_str("variant", &RunConfig::variant);
        add_int("corpus_ids", &RunConfig::corpus_ids);
        add_int("corpus_poses", &RunConfig::corpus_poses);
        add_int("corpus_size", &RunConfig::corpus_size);
        add_real("split_ratio", &RunConfig::split_ratio);
        add_int("pairs_cap", &RunConfig::pairs_cap);
        add_real("id_threshold", &RunConfig::id_threshold);
        d.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); }});
        add_int("threads", &RunConfig::threads);
        add_int("eval_pairs", &RunConfig::eval_pairs);

        std::sort(d.begin(), d.end(), [](const KeyDef& a, const KeyDef& b) { return a.name < b.name; });
        return d;
    }();
    return defs;
}

const KeyDef* find_key(const std::string& name) {
    for (const auto& k : registry())
        if (k.name == name) return &k;
    return nullptr;
}

size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::string nearest_key(const std::string& name) {
    std::string best;
    size_t best_d = SIZE_MAX;
    for (const auto& k : registry()) {
        const size_t d = levenshtein(name, k.name);
        if (d < best_d) {
            best_d = d;
            best   = k.name;
        }
    }
    return best;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : registry()) out.push_back(k.name);
    return out;
}

void apply_config_line(RunConfig& c, const std::string& key, const std::string& value) {
    const KeyDef* def = find_key(key);
    if (!def)
        throw config_error("unknown config key '" + key + "'; did you mean '" + nearest_key(key) + "'?");
    def->set(c, value);
}

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    // Preset expansion must not clobber keys the text sets explicitly, so the
    // preset (if any) is applied first, then every other line in order.
    std::vector<std::tuple<int, std::string, std::string>> lines;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    std::string preset_value;
    while (std::getline(in, raw)) {
        ++lineno;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        raw = trim(raw);
        if (raw.empty()) continue;
        const size_t eq = raw.find('=');
        if (eq == std::string::npos)
            throw config_error("line " + std::to_string(lineno) + ": expected 'key = value', got '" + raw + "'");
        const std::string key   = trim(raw.substr(0, eq));
        const std::string value = trim(raw.substr(eq + 1));
        if (key == "preset")
            preset_value = value;
        else
            lines.emplace_back(lineno, key, value);
    }
    if (!preset_value.empty()) apply_preset(c, preset_value);
    for (const auto& [ln, key, value] : lines) {
        try {
            apply_config_line(c, key, value);
        } catch (const config_error& e) {
            throw config_error("line " + std::to_string(ln) + ": " + e.what());
        }
    }
    return c;
}

std::string emit_config(const RunConfig& c) {
    std::string out;
    for (const auto& k : registry()) out += k.name + " = " + k.get(c) + "\n";
    return out;
}

uint64_t config_hash(const RunConfig& c) { return fnv1a64(emit_config(c)); }

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', '2', 'W', 'C'};

void put_u16(std::string& b, uint16_t v) { b.append(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::string& b, uint32_t v) { b.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& b, uint64_t v) { b.append(reinterpret_cast<const char*>(&v), 8); }

// u64 -> 4 exact 16-bit chunks in f32
void u64_to_f32(uint64_t v, float* out) {
    for (int i = 0; i < 4; ++i) out[i] = float((v >> (16 * i)) & 0xffffULL);
}

uint64_t f32_to_u64(const float* in) {
    uint64_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint64_t(in[i]) & 0xffffULL) << (16 * i);
    return v;
}

struct Reader {
    const std::string& buf;
    size_t off = 0;

    void need(size_t n, const char* what) const {
        if (off + n > buf.size())
            throw corrupt_checkpoint_error(std::string("checkpoint truncated reading ") + what + " at offset " +
                                           std::to_string(off));
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v;
        std::memcpy(&v, buf.data() + off, 2);
        off += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, buf.data() + off, 4);
        off += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v;
        std::memcpy(&v, buf.data() + off, 8);
        off += 8;
        return v;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return uint8_t(buf[off++]);
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(off, n);
        off += n;
        return s;
    }
};

// Metadata rides inside the tensor container as reserved "__meta.*" entries
// (u64s chunked into exact 16-bit pieces, text as one byte per f32). Entries
// equal to their load-time defaults are skipped, so a default-constructed
// checkpoint is the layout's minimal 0-tensor file.
std::map<std::string, Tensor> flatten_checkpoint(const Checkpoint& c) {
    std::map<std::string, Tensor> all;
    for (const auto& [k, v] : c.params.t) all.emplace("param." + k, v);
    for (const auto& [k, v] : c.adam_m.t) all.emplace("adam.m." + k, v);
    for (const auto& [k, v] : c.adam_v.t) all.emplace("adam.v." + k, v);

    if (c.step != 0) {
        Tensor step(Shape{1});
        step[0] = float(c.step);
        all.emplace("__meta.step", step);
    }
    bool rng_set = false;
    for (uint64_t w : c.rng_state) rng_set = rng_set || w != 0;
    if (rng_set) {
        Tensor rng(Shape{16});
        for (int i = 0; i < 4; ++i) u64_to_f32(c.rng_state[size_t(i)], rng.ptr() + 4 * i);
        all.emplace("__meta.rng", rng);
    }
    if (c.config_hash != 0) {
        Tensor hash(Shape{4});
        u64_to_f32(c.config_hash, hash.ptr());
        all.emplace("__meta.config_hash", hash);
    }
    if (!c.config_text.empty()) {
        Tensor text(Shape{int(c.config_text.size())});
        for (size_t i = 0; i < c.config_text.size(); ++i) text[int64_t(i)] = float(uint8_t(c.config_text[i]));
        all.emplace("__meta.config_text", text);
    }
    return all;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const auto all = flatten_checkpoint(ckpt);

    std::string payload;
    for (const auto& [name, t] : all) {
        if (name.size() > 0xffff) throw io_error("tensor name too long: " + name);
        put_u16(payload, uint16_t(name.size()));
        payload += name;
        payload.push_back(char(uint8_t(t.rank())));
        for (int d : t.shape) put_u64(payload, uint64_t(d));
        payload.append(reinterpret_cast<const char*>(t.ptr()), sizeof(float) * size_t(t.numel()));
    }

    std::string file;
    file.append(kMagic, 4);
    put_u32(file, ckpt.version);
    put_u32(file, uint32_t(all.size()));
    file += payload;
    put_u64(file, uint64_t(payload.size()));  // footer: total payload bytes

    // atomic write: temp file + rename
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open for writing: " + tmp);
        out.write(file.data(), std::streamsize(file.size()));
        if (!out) throw io_error("short write: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r{buf};
    const std::string magic = r.bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw corrupt_checkpoint_error("bad checkpoint magic at offset 0 in " + path);
    Checkpoint c;
    c.version = r.u32("version");
    if (c.version != 1)
        throw corrupt_checkpoint_error("unsupported checkpoint version " + std::to_string(c.version) +
                                       " at offset 4");
    const uint32_t count  = r.u32("tensor count");
    const size_t payload0 = r.off;

    std::map<std::string, Tensor> all;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t nlen    = r.u16("name length");
        const std::string name = r.bytes(nlen, "name");
        const uint8_t rank     = r.u8("rank");
        Shape shape;
        int64_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            const uint64_t ext = r.u64("dim");
            if (ext == 0 || ext > (1u << 30))
                throw corrupt_checkpoint_error("implausible extent " + std::to_string(ext) + " at offset " +
                                               std::to_string(r.off - 8));
            shape.push_back(int(ext));
            numel *= int64_t(ext);
        }
        const std::string data = r.bytes(size_t(numel) * 4, "tensor data");
        Tensor t(shape);
        std::memcpy(t.ptr(), data.data(), data.size());
        all.emplace(name, std::move(t));
    }
    const uint64_t footer = r.u64("footer");
    if (footer != uint64_t(r.off - 8 - payload0))
        throw corrupt_checkpoint_error("footer payload size " + std::to_string(footer) +
                                       " does not match actual " + std::to_string(r.off - 8 - payload0));

    for (auto& [name, t] : all) {
        if (name.rfind("param.", 0) == 0)
            c.params.t.emplace(name.substr(6), std::move(t));
        else if (name.rfind("adam.m.", 0) == 0)
            c.adam_m.t.emplace(name.substr(7), std::move(t));
        else if (name.rfind("adam.v.", 0) == 0)
            c.adam_v.t.emplace(name.substr(7), std::move(t));
        else if (name == "__meta.step")
            c.step = int64_t(t[0]);
        else if (name == "__meta.rng")
            for (int i = 0; i < 4; ++i) c.rng_state[size_t(i)] = f32_to_u64(t.ptr() + 4 * i);
        else if (name == "__meta.config_hash")
            c.config_hash = f32_to_u64(t.ptr());
        else if (name == "__meta.config_text") {
            c.config_text.resize(size_t(t.numel()));
            for (int64_t i = 0; i < t.numel(); ++i) c.config_text[size_t(i)] = char(uint8_t(t[i]));
        } else
            throw corrupt_checkpoint_error("unrecognized tensor '" + name + "' in checkpoint");
    }

    // tamper detection: stored hash must match the stored canonical config
    if (!c.config_text.empty() && fnv1a64(c.config_text) != c.config_hash)
        throw corrupt_checkpoint_error("config hash mismatch: checkpoint config was tampered with");
    return c;
}

std::vector<std::tuple<std::string, Shape, uint64_t>> checkpoint_listing(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    const auto all = flatten_checkpoint(c);
    std::vector<std::tuple<std::string, Shape, uint64_t>> out;
    for (const auto& [name, t] : all) {
        const uint64_t sum = fnv1a64(
            std::string_view(reinterpret_cast<const char*>(t.ptr()), sizeof(float) * size_t(t.numel())));
        out.emplace_back(name, t.shape, sum);
    }
    return out;
}

}  // namespace refdiff
