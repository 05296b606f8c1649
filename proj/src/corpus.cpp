#include "refdiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

namespace refdiff {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Labels and identity attributes
// ---------------------------------------------------------------------------

int class_label_for_parsing(ParsingLabel p) {
    switch (p) {
        case kHead: return kHairHead;
        case kTorso: return kUpperBody;
        case kLegs: return kLowerBody;
        case kFeet: return kFootwear;
        default: throw validation_error("background has no class label");
    }
}

const char* class_label_name(int label) {
    switch (label) {
        case kUpperBody: return "upper_body_clothes";
        case kLowerBody: return "lower_body_clothes";
        case kWholeBody: return "whole_body_clothes";
        case kHairHead: return "hair_or_headwear";
        case kFace: return "face";
        case kFootwear: return "footwear";
        default: return "unknown";
    }
}

Tensor Identity::attrs() const {
    Tensor t(Shape{8});
    t[0] = head_hue;
    t[1] = torso_hue;
    t[2] = float(torso_pattern) / 3.0f;
    t[3] = legs_hue;
    t[4] = feet_hue;
    t[5] = prop_torso;
    t[6] = prop_leg;
    t[7] = prop_head;
    return t;
}

Identity sample_identity(int id, Rng& rng) {
    Identity i;
    i.id            = id;
    i.head_hue      = float(rng.uniform());
    i.torso_hue     = float(rng.uniform());
    i.legs_hue      = float(rng.uniform());
    i.feet_hue      = float(rng.uniform());
    i.torso_pattern = int(rng.below(4));
    i.prop_torso    = float(rng.uniform());
    i.prop_leg      = float(rng.uniform());
    i.prop_head     = float(rng.uniform());
    return i;
}

FigPose sample_pose(Rng& rng) {
    auto range = [&](double lo, double hi) { return float(lo + (hi - lo) * rng.uniform()); };
    FigPose p;
    p.lean    = range(-0.30, 0.30);
    p.l_thigh = range(-0.45, 0.45);
    p.l_knee  = range(0.0, 0.6);
    p.r_thigh = range(-0.45, 0.45);
    p.r_knee  = range(0.0, 0.6);
    return p;
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

namespace {

struct Vec2 {
    float x = 0, y = 0;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(float s, Vec2 a) { return {s * a.x, s * a.y}; }

float dist_to_segment(Vec2 p, Vec2 a, Vec2 b) {
    const Vec2 ab = b - a;
    const float len2 = ab.x * ab.x + ab.y * ab.y;
    float t = len2 > 0 ? ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2 : 0.0f;
    t       = std::clamp(t, 0.0f, 1.0f);
    const Vec2 q = a + t * ab;
    return std::hypot(p.x - q.x, p.y - q.y);
}

void hsv_to_rgb(float h, float s, float v, uint8_t out[3]) {
    h           = h - std::floor(h);
    const float c = v * s;
    const float hp = h * 6.0f;
    const float x  = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
    float r = 0, g = 0, b = 0;
    switch (int(hp) % 6) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    const float m = v - c;
    out[0]        = uint8_t(std::lround((r + m) * 255.0f));
    out[1]        = uint8_t(std::lround((g + m) * 255.0f));
    out[2]        = uint8_t(std::lround((b + m) * 255.0f));
}

struct Raster {
    ImageU8* image;
    ImageU8* parsing;  // may be null (pose raster drawing)
    int size;

    void put(int y, int x, const uint8_t rgb[3], uint8_t label) {
        image->set(y, x, 0, rgb[0]);
        image->set(y, x, 1, rgb[1]);
        image->set(y, x, 2, rgb[2]);
        if (parsing) parsing->set(y, x, 0, label);
    }

    void capsule(Vec2 a, Vec2 b, float r, const uint8_t rgb[3], uint8_t label) {
        const int x0 = std::max(0, int(std::floor((std::min(a.x, b.x) - r) * float(size))));
        const int x1 = std::min(size - 1, int(std::ceil((std::max(a.x, b.x) + r) * float(size))));
        const int y0 = std::max(0, int(std::floor((std::min(a.y, b.y) - r) * float(size))));
        const int y1 = std::min(size - 1, int(std::ceil((std::max(a.y, b.y) + r) * float(size))));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const Vec2 p{(float(x) + 0.5f) / float(size), (float(y) + 0.5f) / float(size)};
                if (dist_to_segment(p, a, b) <= r) put(y, x, rgb, label);
            }
    }

    void disk(Vec2 c, float r, const uint8_t rgb[3], uint8_t label) { capsule(c, c, r, rgb, label); }

    void quad(Vec2 q0, Vec2 q1, Vec2 q2, Vec2 q3, const uint8_t rgb[3], uint8_t label,
              int pattern) {
        auto cross = [](Vec2 o, Vec2 a, Vec2 b) {
            return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
        };
        auto inside_tri = [&](Vec2 p, Vec2 a, Vec2 b, Vec2 c) {
            const float d1 = cross(p, a, b), d2 = cross(p, b, c), d3 = cross(p, c, a);
            const bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
            const bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
            return !(neg && pos);
        };
        const float xs[4] = {q0.x, q1.x, q2.x, q3.x}, ys[4] = {q0.y, q1.y, q2.y, q3.y};
        const int x0 = std::max(0, int(std::floor(*std::min_element(xs, xs + 4) * float(size))));
        const int x1 = std::min(size - 1, int(std::ceil(*std::max_element(xs, xs + 4) * float(size))));
        const int y0 = std::max(0, int(std::floor(*std::min_element(ys, ys + 4) * float(size))));
        const int y1 = std::min(size - 1, int(std::ceil(*std::max_element(ys, ys + 4) * float(size))));
        const int stripe = std::max(2, size / 10);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const Vec2 p{(float(x) + 0.5f) / float(size), (float(y) + 0.5f) / float(size)};
                if (!inside_tri(p, q0, q1, q2) && !inside_tri(p, q0, q2, q3)) continue;
                uint8_t rgb2[3] = {rgb[0], rgb[1], rgb[2]};
                bool dark       = false;
                if (pattern == 1) dark = (y / stripe) % 2 == 1;
                if (pattern == 2) dark = (x / stripe) % 2 == 1;
                if (pattern == 3) dark = ((y / stripe) % 2) ^ ((x / stripe) % 2);
                if (dark)
                    for (int c = 0; c < 3; ++c) rgb2[c] = uint8_t(float(rgb2[c]) * 0.55f);
                put(y, x, rgb2, label);
            }
    }
};

struct Skeleton {
    Vec2 pelvis, neck, head_c;
    Vec2 hip_l, knee_l, ankle_l, foot_l;
    Vec2 hip_r, knee_r, ankle_r, foot_r;
    float head_r = 0, thigh_len = 0;
};

Skeleton build_skeleton(const Identity& ident, const FigPose& pose) {
    Skeleton s;
    s.pelvis = {0.5f, 0.58f};
    const float lt = 0.20f + 0.06f * ident.prop_torso;
    s.neck   = s.pelvis + Vec2{lt * std::sin(pose.lean), -lt * std::cos(pose.lean)};
    s.head_r = 0.065f + 0.03f * ident.prop_head;
    s.head_c = s.neck + Vec2{(s.head_r + 0.012f) * std::sin(pose.lean), -(s.head_r + 0.012f) * std::cos(pose.lean)};

    const float ll = 0.13f + 0.04f * ident.prop_leg;
    s.thigh_len    = ll;
    s.hip_l        = s.pelvis + Vec2{-0.035f, 0.0f};
    s.hip_r        = s.pelvis + Vec2{0.035f, 0.0f};
    s.knee_l       = s.hip_l + Vec2{ll * std::sin(pose.l_thigh), ll * std::cos(pose.l_thigh)};
    s.knee_r       = s.hip_r + Vec2{ll * std::sin(pose.r_thigh), ll * std::cos(pose.r_thigh)};
    const float la = pose.l_thigh + pose.l_knee;  // knees bend forward
    const float ra = pose.r_thigh - pose.r_knee;
    s.ankle_l      = s.knee_l + Vec2{ll * std::sin(la), ll * std::cos(la)};
    s.ankle_r      = s.knee_r + Vec2{ll * std::sin(ra), ll * std::cos(ra)};
    s.foot_l       = s.ankle_l + Vec2{-0.050f, 0.012f};
    s.foot_r       = s.ankle_r + Vec2{0.050f, 0.012f};
    return s;
}

}  // namespace

Sample render_sample(const Identity& ident, const FigPose& pose, int size) {
    const Skeleton s = build_skeleton(ident, pose);

    const float margin = 0.02f;
    const Vec2 pts[]   = {s.head_c + Vec2{0, -s.head_r}, s.head_c + Vec2{0, s.head_r},
                          s.head_c + Vec2{-s.head_r, 0}, s.head_c + Vec2{s.head_r, 0},
                          s.neck,    s.pelvis,  s.knee_l, s.ankle_l,
                          s.foot_l,  s.knee_r,  s.ankle_r, s.foot_r};
    for (const Vec2& p : pts)
        if (p.x < margin || p.x > 1.0f - margin || p.y < margin || p.y > 1.0f - margin)
            throw validation_error("figure out of frame for this pose; resample the pose");

    Sample out;
    out.image   = ImageU8::filled(size, size, 3, 25);  // dark backdrop
    out.parsing = ImageU8::filled(size, size, 1, kBg);
    out.pose    = pose;
    out.keypoints = {{s.pelvis.x, s.pelvis.y}, {s.neck.x, s.neck.y},     {s.head_c.x, s.head_c.y},
                     {s.knee_l.x, s.knee_l.y}, {s.ankle_l.x, s.ankle_l.y}, {s.knee_r.x, s.knee_r.y},
                     {s.ankle_r.x, s.ankle_r.y}};

    Raster r{&out.image, &out.parsing, size};
    uint8_t col[3];

    // draw order: legs, feet, torso, head (later parts overwrite)
    hsv_to_rgb(ident.legs_hue, 0.85f, 0.9f, col);
    r.capsule(s.hip_l, s.knee_l, 0.024f, col, kLegs);
    r.capsule(s.knee_l, s.ankle_l, 0.022f, col, kLegs);
    r.capsule(s.hip_r, s.knee_r, 0.024f, col, kLegs);
    r.capsule(s.knee_r, s.ankle_r, 0.022f, col, kLegs);

    hsv_to_rgb(ident.feet_hue, 0.85f, 0.9f, col);
    r.capsule(s.ankle_l, s.foot_l, 0.020f, col, kFeet);
    r.capsule(s.ankle_r, s.foot_r, 0.020f, col, kFeet);

    hsv_to_rgb(ident.torso_hue, 0.85f, 0.9f, col);
    const Vec2 axis  = s.neck - s.pelvis;
    const float alen = std::hypot(axis.x, axis.y);
    const Vec2 perp{-axis.y / alen, axis.x / alen};
    const float w_top = 0.055f + 0.025f * ident.prop_torso;
    const float w_bot = 0.045f + 0.020f * ident.prop_torso;
    r.quad(s.neck + w_top * perp, s.neck - w_top * perp, s.pelvis - w_bot * perp, s.pelvis + w_bot * perp,
           col, kTorso, ident.torso_pattern);

    hsv_to_rgb(ident.head_hue, 0.85f, 0.9f, col);
    r.disk(s.head_c, s.head_r, col, kHead);

    // pose raster: per-bone colors on black
    out.pose_raster = ImageU8::filled(size, size, 3, 0);
    Raster pr{&out.pose_raster, nullptr, size};
    const uint8_t bone_colors[8][3] = {{255, 85, 85}, {255, 255, 85}, {85, 255, 85},  {85, 255, 255},
                                       {85, 85, 255}, {255, 85, 255}, {255, 170, 85}, {170, 85, 255}};
    const float br = 0.013f;
    pr.capsule(s.pelvis, s.neck, br, bone_colors[0], 0);
    pr.capsule(s.neck, s.head_c, br, bone_colors[1], 0);
    pr.capsule(s.hip_l, s.knee_l, br, bone_colors[2], 0);
    pr.capsule(s.knee_l, s.ankle_l, br, bone_colors[3], 0);
    pr.capsule(s.hip_r, s.knee_r, br, bone_colors[4], 0);
    pr.capsule(s.knee_r, s.ankle_r, br, bone_colors[5], 0);
    pr.capsule(s.ankle_l, s.foot_l, br, bone_colors[6], 0);
    pr.capsule(s.ankle_r, s.foot_r, br, bone_colors[7], 0);
    return out;
}

// ---------------------------------------------------------------------------
// Part cropping
// ---------------------------------------------------------------------------

std::vector<CroppedPart> crop_parts(const Sample& sample, int canvas) {
    const int S = sample.image.width;
    std::vector<CroppedPart> out;
    for (ParsingLabel lab : {kHead, kTorso, kLegs, kFeet}) {
        int x0 = S, y0 = S, x1 = -1, y1 = -1;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                if (sample.parsing.at(y, x) == lab) {
                    x0 = std::min(x0, x);
                    y0 = std::min(y0, y);
                    x1 = std::max(x1, x);
                    y1 = std::max(y1, y);
                }
        if (x1 < 0) continue;  // empty region: class omitted

        // 1px pad, squared, shifted into frame
        x0 = x0 - 1;
        y0 = y0 - 1;
        x1 = x1 + 1;
        y1 = y1 + 1;
        int side = std::max(x1 - x0 + 1, y1 - y0 + 1);
        side     = std::min(side, S);
        int cx   = (x0 + x1) / 2, cy = (y0 + y1) / 2;
        int sx0  = std::clamp(cx - side / 2, 0, S - side);
        int sy0  = std::clamp(cy - side / 2, 0, S - side);

        CroppedPart cp;
        cp.parsing_label = lab;
        cp.src_x0        = sx0;
        cp.src_y0        = sy0;
        cp.src_size      = side;
        cp.part.label    = class_label_for_parsing(lab);
        cp.part.mask.h   = canvas;
        cp.part.mask.w   = canvas;
        cp.part.mask.keep.assign(size_t(canvas) * canvas, 0);
        cp.part.image = Tensor(Shape{1, 3, canvas, canvas});

        if (side == canvas) {
            // unit scale: direct copy, bit-exact round trip
            for (int y = 0; y < canvas; ++y)
                for (int x = 0; x < canvas; ++x) {
                    const bool in = sample.parsing.at(sy0 + y, sx0 + x) == lab;
                    cp.part.mask.keep[size_t(y) * canvas + x] = uint8_t(in);
                    for (int c = 0; c < 3; ++c)
                        cp.part.image[cp.part.image.offset4(0, c, y, x)] =
                            in ? float(sample.image.at(sy0 + y, sx0 + x, c)) / 255.0f : 0.5f;
                }
        } else {
            const float scale = float(side) / float(canvas);
            for (int y = 0; y < canvas; ++y)
                for (int x = 0; x < canvas; ++x) {
                    // nearest for the mask
                    const int ny = std::min(side - 1, int((float(y) + 0.5f) * scale));
                    const int nx = std::min(side - 1, int((float(x) + 0.5f) * scale));
                    const bool in = sample.parsing.at(sy0 + ny, sx0 + nx) == lab;
                    cp.part.mask.keep[size_t(y) * canvas + x] = uint8_t(in);
                    if (!in) {
                        for (int c = 0; c < 3; ++c)
                            cp.part.image[cp.part.image.offset4(0, c, y, x)] = 0.5f;
                        continue;
                    }
                    // bilinear for the image
                    float fy = (float(y) + 0.5f) * scale - 0.5f;
                    float fx = (float(x) + 0.5f) * scale - 0.5f;
                    fy       = std::clamp(fy, 0.0f, float(side - 1));
                    fx       = std::clamp(fx, 0.0f, float(side - 1));
                    const int iy0 = int(fy), ix0 = int(fx);
                    const int iy1 = std::min(iy0 + 1, side - 1), ix1 = std::min(ix0 + 1, side - 1);
                    const float wy = fy - float(iy0), wx = fx - float(ix0);
                    for (int c = 0; c < 3; ++c) {
                        auto at = [&](int yy, int xx) {
                            return float(sample.image.at(sy0 + yy, sx0 + xx, c)) / 255.0f;
                        };
                        cp.part.image[cp.part.image.offset4(0, c, y, x)] =
                            (1 - wy) * ((1 - wx) * at(iy0, ix0) + wx * at(iy0, ix1)) +
                            wy * ((1 - wx) * at(iy1, ix0) + wx * at(iy1, ix1));
                    }
                }
        }
        out.push_back(std::move(cp));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ID cleansing
// ---------------------------------------------------------------------------

std::vector<int> id_cleanse(const std::vector<std::vector<float>>& embeddings, double threshold) {
    const size_t n = embeddings.size();
    std::vector<double> norms(n);
    for (size_t i = 0; i < n; ++i) {
        double s = 0;
        for (float v : embeddings[i]) s += double(v) * v;
        norms[i] = std::sqrt(s);
        if (!(norms[i] > 0)) throw validation_error("id_cleanse: zero embedding vector at index " + std::to_string(i));
    }
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) { return parent[size_t(x)] == x ? x : parent[size_t(x)] = find(parent[size_t(x)]); };
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            if (embeddings[i].size() != embeddings[j].size())
                throw dimension_error("id_cleanse: embedding dims differ");
            double dot = 0;
            for (size_t k = 0; k < embeddings[i].size(); ++k)
                dot += double(embeddings[i][k]) * double(embeddings[j][k]);
            if (dot / (norms[i] * norms[j]) >= threshold) {
                const int a = find(int(i)), b = find(int(j));
                if (a != b) parent[size_t(std::max(a, b))] = std::min(a, b);
            }
        }
    std::vector<int> group(n, -1);
    std::map<int, int> renumber;
    for (size_t i = 0; i < n; ++i) {
        const int root = find(int(i));
        auto [it, fresh] = renumber.emplace(root, int(renumber.size()));
        group[i]         = it->second;
    }
    return group;
}

// ---------------------------------------------------------------------------
// Pair construction
// ---------------------------------------------------------------------------

PairBuildReport build_pairs(const std::vector<int>& samples_per_identity, Rng& rng, int cap_per_identity) {
    PairBuildReport rep;
    for (size_t ident = 0; ident < samples_per_identity.size(); ++ident) {
        const int k = samples_per_identity[ident];
        if (k < 2) {
            ++rep.skipped_identities;
            continue;
        }
        std::vector<PairIndex> all;
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b)
                if (a != b) all.push_back({int(ident), a, b});
        if (cap_per_identity > 0 && int(all.size()) > cap_per_identity) {
            // deterministic subsample without replacement
            std::vector<PairIndex> chosen;
            for (int c = 0; c < cap_per_identity; ++c) {
                const size_t pos = size_t(rng.below(uint64_t(all.size())));
                chosen.push_back(all[pos]);
                all.erase(all.begin() + long(pos));
            }
            all = std::move(chosen);
        }
        rep.pairs.insert(rep.pairs.end(), all.begin(), all.end());
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

namespace {

std::string id_dir(int ident) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ids/id%04d", ident);
    return buf;
}

void write_attrs(const std::string& path, const Tensor& attrs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(attrs.ptr()), std::streamsize(sizeof(float) * size_t(attrs.numel())));
}

Tensor read_attrs(const std::string& path, int dim) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot read " + path);
    Tensor t(Shape{dim});
    in.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(sizeof(float) * size_t(dim)));
    if (in.gcount() != std::streamsize(sizeof(float) * size_t(dim)))
        throw io_error("truncated attribute file " + path);
    return t;
}

ImageU8 mask_to_pgm(const MaskLevel& m) {
    ImageU8 img = ImageU8::filled(m.w, m.h, 1, 0);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) img.set(y, x, 0, m.keep[size_t(y) * m.w + x] ? 255 : 0);
    return img;
}

ImageU8 tensor_part_to_ppm(const Tensor& t) { return tensor_to_image(t); }

}  // namespace

CorpusGenReport gen_corpus(const CorpusGenConfig& cfg, const std::string& out_dir) {
    if (cfg.n_identities <= 0 || cfg.poses_per_id <= 0) throw config_error("corpus needs identities and poses");
    if (cfg.split_ratio < 0.0 || cfg.split_ratio > 1.0) throw config_error("split_ratio must lie in [0,1]");
    if (fs::exists(out_dir)) throw io_error("corpus output directory already exists: " + out_dir);

    const fs::path tmp = out_dir + ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp / "ids");

    Rng master(cfg.seed);
    CorpusGenReport rep;
    rep.identities = cfg.n_identities;

    struct SampleFiles {
        std::string target, pose;
        std::vector<PairRecord::PartRef> parts;
    };
    std::vector<std::vector<SampleFiles>> files(size_t(cfg.n_identities));
    std::vector<std::vector<float>> embeddings;
    std::vector<std::pair<int, int>> embed_owner;  // (identity, sample)

    for (int ident = 0; ident < cfg.n_identities; ++ident) {
        Rng id_rng        = master.split(0x1d, uint64_t(ident));
        const Identity id = sample_identity(ident, id_rng);
        const fs::path dir = tmp / id_dir(ident);
        fs::create_directories(dir);
        write_attrs((dir / "attrs.bin").string(), id.attrs());

        for (int s = 0; s < cfg.poses_per_id; ++s) {
            Rng pose_rng = master.split(0x90e, uint64_t(ident) * 1000 + uint64_t(s));
            Sample sample;
            bool ok = false;
            for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
                try {
                    sample = render_sample(id, sample_pose(pose_rng), cfg.size);
                    ok     = true;
                } catch (const validation_error&) {
                    // out-of-frame pose: resample
                }
            }
            if (!ok) throw validation_error("could not find an in-frame pose after 64 attempts");

            char name[64];
            SampleFiles sf;
            std::snprintf(name, sizeof(name), "%s/sample_%d.ppm", id_dir(ident).c_str(), s);
            sf.target = name;
            write_ppm((tmp / name).string(), sample.image);
            std::snprintf(name, sizeof(name), "%s/parsing_%d.pgm", id_dir(ident).c_str(), s);
            write_pgm((tmp / name).string(), sample.parsing);
            std::snprintf(name, sizeof(name), "%s/pose_%d.ppm", id_dir(ident).c_str(), s);
            sf.pose = name;
            write_ppm((tmp / name).string(), sample.pose_raster);

            for (const auto& cp : crop_parts(sample, cfg.part_canvas)) {
                PairRecord::PartRef ref;
                std::snprintf(name, sizeof(name), "%s/part_%d_%d.ppm", id_dir(ident).c_str(), s, cp.part.label);
                ref.image_path = name;
                write_ppm((tmp / name).string(), tensor_part_to_ppm(cp.part.image));
                std::snprintf(name, sizeof(name), "%s/mask_%d_%d.pgm", id_dir(ident).c_str(), s, cp.part.label);
                ref.mask_path = name;
                write_pgm((tmp / name).string(), mask_to_pgm(cp.part.mask));
                ref.label = cp.part.label;
                sf.parts.push_back(std::move(ref));
            }
            files[size_t(ident)].push_back(std::move(sf));
            ++rep.samples;

            // per-sample ID embedding: the four hues mapped onto the unit
            // circle (so distinct identities are angularly separated), plus
            // small per-sample noise, normalized.
            Rng erng = master.split(0xe3b, uint64_t(ident) * 1000 + uint64_t(s));
            std::vector<float> emb(8);
            const float hues[4] = {id.head_hue, id.torso_hue, id.legs_hue, id.feet_hue};
            double norm = 0;
            for (int k = 0; k < 4; ++k) {
                const double a     = 2.0 * 3.14159265358979323846 * double(hues[k]);
                emb[size_t(2 * k)]     = float(std::cos(a)) + 0.03f * float(erng.normal());
                emb[size_t(2 * k + 1)] = float(std::sin(a)) + 0.03f * float(erng.normal());
            }
            for (float v : emb) norm += double(v) * v;
            for (auto& v : emb) v = float(double(v) / std::sqrt(norm));
            embeddings.push_back(std::move(emb));
            embed_owner.emplace_back(ident, s);
        }
    }

    // ID cleansing: group per-sample embeddings; pairs form only within an
    // identity AND a cleansed group (cleansing can split, never merge pairs).
    const std::vector<int> groups = id_cleanse(embeddings, cfg.id_threshold);
    rep.cleanse_groups            = 1 + *std::max_element(groups.begin(), groups.end());
    std::map<std::pair<int, int>, std::vector<int>> buckets;  // (identity, group) -> sample idx
    for (size_t e = 0; e < embeddings.size(); ++e)
        buckets[{embed_owner[e].first, groups[e]}].push_back(embed_owner[e].second);

    // identity-disjoint split
    Rng split_rng = master.split(0x5b11);
    std::vector<int> order(size_t(cfg.n_identities));
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[size_t(split_rng.below(uint64_t(i)))]);
    const int n_train = int(std::lround(cfg.split_ratio * cfg.n_identities));
    std::vector<bool> is_train(size_t(cfg.n_identities), false);
    for (int i = 0; i < n_train; ++i) is_train[size_t(order[size_t(i)])] = true;

    // pair construction per bucket
    Rng pair_rng = master.split(0xbadd);
    std::vector<std::pair<int, std::vector<int>>> bucket_list;  // identity, samples
    for (auto& [key, samples] : buckets) bucket_list.emplace_back(key.first, samples);
    std::vector<int> counts;
    for (auto& [ident, samples] : bucket_list) counts.push_back(int(samples.size()));
    PairBuildReport pb        = build_pairs(counts, pair_rng, cfg.cap_per_identity);
    rep.skipped_identities    = pb.skipped_identities;

    std::ofstream manifest(tmp / "manifest.tsv");
    if (!manifest) throw io_error("cannot write manifest");
    int pair_no = 0;
    for (const auto& pi : pb.pairs) {
        const int ident              = bucket_list[size_t(pi.identity)].first;
        const std::vector<int>& sm   = bucket_list[size_t(pi.identity)].second;
        const SampleFiles& ref_smp   = files[size_t(ident)][size_t(sm[size_t(pi.a)])];
        const SampleFiles& tgt_smp   = files[size_t(ident)][size_t(sm[size_t(pi.b)])];
        const bool train             = is_train[size_t(ident)];
        char pid[16];
        std::snprintf(pid, sizeof(pid), "p%06d", pair_no++);
        manifest << pid << '\t' << (train ? "train" : "test") << '\t' << ident << '\t' << tgt_smp.target
                 << '\t' << tgt_smp.pose;
        for (const auto& part : ref_smp.parts)
            manifest << '\t' << part.image_path << '\t' << part.mask_path << '\t' << part.label;
        manifest << '\n';
        (train ? rep.train_pairs : rep.test_pairs)++;
    }
    manifest.close();

    fs::rename(tmp, out_dir);  // atomic publish
    return rep;
}

// ---------------------------------------------------------------------------
// Manifest reading and pair loading
// ---------------------------------------------------------------------------

std::vector<PairRecord> read_manifest(const std::string& corpus_dir) {
    const std::string path = (fs::path(corpus_dir) / "manifest.tsv").string();
    std::ifstream in(path);
    if (!in) throw io_error("cannot open manifest: " + path);
    std::vector<PairRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t pos = 0;
        while (pos <= line.size()) {
            size_t next = line.find('\t', pos);
            if (next == std::string::npos) next = line.size();
            cols.push_back(line.substr(pos, next - pos));
            pos = next + 1;
        }
        if (cols.size() < 5 || (cols.size() - 5) % 3 != 0)
            throw io_error("manifest line " + std::to_string(lineno) + " malformed");
        PairRecord r;
        r.pair_id     = cols[0];
        r.split       = cols[1];
        r.identity    = std::stoi(cols[2]);
        r.target_path = cols[3];
        r.pose_path   = cols[4];
        for (size_t c = 5; c + 3 <= cols.size(); c += 3)
            r.parts.push_back({cols[c], cols[c + 1], std::stoi(cols[c + 2])});
        out.push_back(std::move(r));
    }
    return out;
}

LoadedPair load_pair(const std::string& corpus_dir, const PairRecord& rec) {
    const fs::path root = corpus_dir;
    LoadedPair lp;
    lp.pair_id      = rec.pair_id;
    lp.identity     = rec.identity;
    lp.target_image = image_to_tensor(read_pnm((root / rec.target_path).string()));

    std::string parsing_path = rec.target_path;
    const size_t p           = parsing_path.rfind("sample_");
    if (p != std::string::npos) parsing_path = parsing_path.substr(0, p) + "parsing_" + parsing_path.substr(p + 7);
    parsing_path             = parsing_path.substr(0, parsing_path.size() - 3) + "pgm";
    lp.target_parsing        = read_pnm((root / parsing_path).string());

    lp.cond.pose  = image_to_tensor(read_pnm((root / rec.pose_path).string()));
    lp.cond.attrs = read_attrs((root / id_dir(rec.identity) / "attrs.bin").string(), 8);
    for (const auto& part : rec.parts) {
        RefPart rp;
        rp.image        = image_to_tensor(read_pnm((root / part.image_path).string()));
        const ImageU8 m = read_pnm((root / part.mask_path).string());
        rp.mask.h       = m.height;
        rp.mask.w       = m.width;
        rp.mask.keep.resize(size_t(m.width) * m.height);
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x) rp.mask.keep[size_t(y) * m.width + x] = uint8_t(m.at(y, x) > 0);
        rp.label = part.label;
        lp.cond.refs.push_back(std::move(rp));
    }
    return lp;
}

}  // namespace refdiff
