#include "wemoe/bench.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

namespace wemoe {

using ad::Tape;
using ad::Var;

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

// Image under construction; u, v are normalized pixel-centre coordinates.
struct Canvas {
    std::size_t s;
    std::vector<double> px;

    explicit Canvas(std::size_t size, double fill = 0.0) : s(size), px(size * size, fill) {}
    double u(std::size_t x) const { return (static_cast<double>(x) + 0.5) / static_cast<double>(s); }

    template <class F>
    void paint(F f) {
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) px[y * s + x] = f(u(x), u(y));
    }
    template <class F>
    void add(F f) {
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) px[y * s + x] += f(u(x), u(y));
    }

    Tensor finish(std::mt19937_64 & rng, double noise) {
        std::normal_distribution<double> nd(0.0, noise > 0 ? noise : 1.0);
        for (auto & p : px) {
            if (noise > 0) p += nd(rng);
            p = round_to_precision(std::clamp(p, 0.0, 1.0));
        }
        return Tensor({s, s, 1}, std::move(px));
    }
};

// 5x5 glyph bitmaps, rows top to bottom.
constexpr const char * kGlyphs[8][5] = {
    {"#####", "..#..", "..#..", "..#..", "..#.."}, // T
    {"#....", "#....", "#....", "#....", "#####"}, // L
    {"#...#", ".#.#.", "..#..", ".#.#.", "#...#"}, // X
    {".###.", "#...#", "#...#", "#...#", ".###."}, // O
    {"..#..", "..#..", "#####", "..#..", "..#.."}, // +
    {"#...#", "#...#", "#####", "#...#", "#...#"}, // H
    {"#####", "...#.", "..#..", ".#...", "#####"}, // Z
    {"#...#", "#...#", ".#.#.", ".#.#.", "..#.."}, // V
};

} // namespace

const char * family_name(TaskFamily f) {
    switch (f) {
        case TaskFamily::StripeOrientation: return "stripe-orientation";
        case TaskFamily::BlobCount: return "blob-count";
        case TaskFamily::CheckerFrequency: return "checker-frequency";
        case TaskFamily::GlyphTemplate: return "glyph-template";
        case TaskFamily::RingRadius: return "ring-radius";
        case TaskFamily::CornerQuadrant: return "corner-quadrant";
        case TaskFamily::GradientDirection: return "gradient-direction";
        case TaskFamily::NoiseTexture: return "noise-texture";
    }
    return "?";
}

TaskFamily parse_family(const std::string & s) {
    for (auto f : all_families())
        if (s == family_name(f)) return f;
    throw DataError("unknown task family '" + s + "'");
}

std::size_t family_max_classes(TaskFamily f) {
    switch (f) {
        case TaskFamily::StripeOrientation: return 8;
        case TaskFamily::BlobCount: return 5;
        case TaskFamily::CheckerFrequency: return 6;
        case TaskFamily::GlyphTemplate: return 8;
        case TaskFamily::RingRadius: return 6;
        case TaskFamily::CornerQuadrant: return 4;
        case TaskFamily::GradientDirection: return 8;
        case TaskFamily::NoiseTexture: return 4;
    }
    return 0;
}

const std::vector<TaskFamily> & all_families() {
    static const std::vector<TaskFamily> f = {
        TaskFamily::StripeOrientation, TaskFamily::BlobCount,   TaskFamily::CheckerFrequency,
        TaskFamily::GlyphTemplate,     TaskFamily::RingRadius,  TaskFamily::CornerQuadrant,
        TaskFamily::GradientDirection, TaskFamily::NoiseTexture,
    };
    return f;
}

void SyntheticTaskSpec::validate() const {
    if (classes < 2) throw ContractError("task spec: need at least 2 classes");
    if (classes > family_max_classes(family))
        throw ContractError(std::string("task spec: ") + family_name(family) + " supports at most " +
                            std::to_string(family_max_classes(family)) + " classes, got " + std::to_string(classes));
    if (image_size < 8) throw ContractError("task spec: image size must be at least 8");
    if (noise < 0) throw ContractError("task spec: noise must be non-negative");
}

Sample generate_sample(const SyntheticTaskSpec & spec, std::size_t index) {
    std::mt19937_64 rng(mix(spec.seed, static_cast<std::uint64_t>(spec.family) + 101, index));
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
    const std::size_t C = spec.classes;
    const int label = static_cast<int>(index % C);
    const double k = static_cast<double>(label);
    Canvas cv(spec.image_size);
    Sample out;
    out.label = label;

    switch (spec.family) {
        case TaskFamily::StripeOrientation: {
            // orientation bins of width pi/C; jitter stays inside a quarter bin
            const double theta = (k + uni(-0.25, 0.25)) * kPi / static_cast<double>(C);
            const double f = uni(2.0, 3.0), phase = uni(0.0, 2 * kPi);
            cv.paint([&](double u, double v) {
                return 0.5 + 0.4 * std::sin(2 * kPi * f * (u * std::cos(theta) + v * std::sin(theta)) + phase);
            });
            out.latent = theta;
            break;
        }
        case TaskFamily::BlobCount: {
            const std::size_t count = static_cast<std::size_t>(label) + 1;
            std::vector<std::pair<double, double>> pts;
            for (int tries = 0; pts.size() < count && tries < 10000; ++tries) {
                const double x = uni(0.15, 0.85), y = uni(0.15, 0.85);
                bool ok = true;
                for (auto [px, py] : pts) ok = ok && std::hypot(px - x, py - y) >= 0.24;
                if (ok) pts.emplace_back(x, y);
            }
            const double sigma = 0.07;
            cv.paint([](double, double) { return 0.1; });
            for (auto [px, py] : pts)
                cv.add([&](double u, double v) {
                    const double d2 = (u - px) * (u - px) + (v - py) * (v - py);
                    return 0.8 * std::exp(-d2 / (2 * sigma * sigma));
                });
            out.latent = static_cast<double>(pts.size());
            break;
        }
        case TaskFamily::CheckerFrequency: {
            const double n = k + 2.0, ox = U(rng), oy = U(rng), a = uni(0.3, 0.45);
            cv.paint([&](double u, double v) {
                const double s = std::sin(kPi * (n * u + ox)) * std::sin(kPi * (n * v + oy));
                return 0.5 + (s >= 0 ? a : -a);
            });
            out.latent = n;
            break;
        }
        case TaskFamily::GlyphTemplate: {
            const double size = uni(0.5, 0.7), x0 = uni(0.0, 1.0 - size), y0 = uni(0.0, 1.0 - size);
            const auto & g = kGlyphs[label];
            cv.paint([&](double u, double v) {
                const double gx = (u - x0) / size * 5.0, gy = (v - y0) / size * 5.0;
                if (gx < 0 || gy < 0 || gx >= 5 || gy >= 5) return 0.15;
                return g[static_cast<int>(gy)][static_cast<int>(gx)] == '#' ? 0.85 : 0.15;
            });
            out.latent = k;
            break;
        }
        case TaskFamily::RingRadius: {
            const double cx = 0.5 + uni(-0.08, 0.08), cy = 0.5 + uni(-0.08, 0.08);
            const double r = 0.12 + 0.26 * k / static_cast<double>(C - 1) + uni(-0.015, 0.015);
            cv.paint([&](double u, double v) {
                const double d = std::hypot(u - cx, v - cy) - r;
                return 0.1 + 0.8 * std::exp(-d * d / (2 * 0.035 * 0.035));
            });
            out.latent = r;
            break;
        }
        case TaskFamily::CornerQuadrant: {
            const double side = uni(0.22, 0.32);
            const double qx = (label % 2) * 0.5, qy = (label / 2) * 0.5;
            const double x0 = qx + uni(0.02, 0.48 - side), y0 = qy + uni(0.02, 0.48 - side);
            const double level = uni(0.65, 0.9);
            cv.paint([&](double u, double v) {
                return (u >= x0 && u < x0 + side && v >= y0 && v < y0 + side) ? level : 0.2;
            });
            out.latent = k;
            break;
        }
        case TaskFamily::GradientDirection: {
            const double phi = (k + uni(-0.3, 0.3)) * 2 * kPi / static_cast<double>(C);
            const double amp = uni(0.25, 0.4);
            cv.paint([&](double u, double v) {
                return 0.5 + amp * 2 * ((u - 0.5) * std::cos(phi) + (v - 0.5) * std::sin(phi));
            });
            out.latent = phi;
            break;
        }
        case TaskFamily::NoiseTexture: {
            // white noise at block size 2^label, bilinearly upsampled
            const double block = std::ldexp(1.0, label) * static_cast<double>(spec.image_size) / 16.0;
            const std::size_t g = static_cast<std::size_t>(std::ceil(static_cast<double>(spec.image_size) / block)) + 2;
            std::vector<double> grid(g * g);
            std::normal_distribution<double> nd(0.0, 0.25);
            for (auto & x : grid) x = nd(rng);
            const double ox = U(rng), oy = U(rng);
            const double S = static_cast<double>(spec.image_size);
            cv.paint([&](double u, double v) {
                const double gx = u * S / block + ox, gy = v * S / block + oy;
                const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
                const double fx = gx - ix, fy = gy - iy;
                auto at = [&](std::size_t a, std::size_t b) { return grid[std::min(b, g - 1) * g + std::min(a, g - 1)]; };
                return 0.5 + (1 - fy) * ((1 - fx) * at(ix, iy) + fx * at(ix + 1, iy)) +
                       fy * ((1 - fx) * at(ix, iy + 1) + fx * at(ix + 1, iy + 1));
            });
            out.latent = block;
            break;
        }
    }
    out.image = cv.finish(rng, spec.noise);
    return out;
}

TaskDataset generate_task_dataset(const SyntheticTaskSpec & spec) {
    spec.validate();
    TaskDataset ds;
    ds.spec = spec;
    for (std::size_t i = 0; i < spec.train_size + spec.test_size; ++i) {
        auto s = generate_sample(spec, i);
        auto & part = i < spec.train_size ? ds.train : ds.test;
        part.images.push_back(std::move(s.image));
        part.labels.push_back(s.label);
    }
    return ds;
}

LabeledImages generate_generic_shapes(std::size_t size, std::size_t count, std::uint64_t seed) {
    LabeledImages out;
    out.aux_labels.assign(4, {});
    for (std::size_t i = 0; i < count; ++i) {
        std::mt19937_64 rng(mix(seed, 0xC0FFEE, i));
        std::uniform_real_distribution<double> U(0.0, 1.0);
        auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
        const int label = static_cast<int>(i % 4);
        const int objects = 1 + static_cast<int>(rng() % 3);
        Canvas cv(size);
        const double bg = uni(0.0, 0.35);
        cv.paint([&](double, double) { return bg; });

        struct Shape {
            int type;
            double cx, cy, r, ang, w, fg;
        };
        std::vector<Shape> shapes;
        // main shape first and largest; distractors are smaller
        const int size_bin = static_cast<int>(rng() % 3);
        const int ang_bin = static_cast<int>(rng() % 4);
        shapes.push_back({label, uni(0.25, 0.75), uni(0.25, 0.75), 0.14 + 0.05 * size_bin + uni(0.0, 0.03),
                          (ang_bin + uni(0.1, 0.9)) * kPi / 4, uni(0.05, 0.08), uni(0.65, 1.0)});
        for (int k = 1; k < objects; ++k)
            shapes.push_back({static_cast<int>(rng() % 4), uni(0.1, 0.9), uni(0.1, 0.9), uni(0.06, 0.1),
                              uni(0.0, kPi), uni(0.03, 0.05), uni(0.5, 0.9)});
        // painted back to front so the main shape stays on top
        for (auto it = shapes.rbegin(); it != shapes.rend(); ++it) {
            const Shape sh = *it;
            const double c = std::cos(sh.ang), s = std::sin(sh.ang);
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double dx = cv.u(x) - sh.cx, dy = cv.u(y) - sh.cy;
                    const double ru = dx * c + dy * s, rv = -dx * s + dy * c;
                    bool in = false;
                    switch (sh.type) {
                        case 0: in = std::abs(ru) < sh.r && std::abs(rv) < sh.r * 0.6; break; // rectangle
                        case 1: in = std::hypot(dx, dy) < sh.r; break;                         // disc
                        case 2: in = std::abs(rv) < sh.w && std::abs(ru) < sh.r * 1.4; break;  // bar
                        default:                                                                 // cross
                            in = (std::abs(rv) < sh.w && std::abs(ru) < sh.r) || (std::abs(ru) < sh.w && std::abs(rv) < sh.r);
                    }
                    if (in) cv.px[y * size + x] = sh.fg;
                }
        }
        const auto & m = shapes.front();
        out.images.push_back(cv.finish(rng, 0.05));
        out.labels.push_back(label);
        out.aux_labels[0].push_back(objects - 1);
        out.aux_labels[1].push_back((m.cx >= 0.5 ? 1 : 0) + (m.cy >= 0.5 ? 2 : 0));
        out.aux_labels[2].push_back(size_bin);
        out.aux_labels[3].push_back(ang_bin);
    }
    return out;
}

const char * corruption_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::GaussianNoise: return "gaussian-noise";
        case CorruptionKind::ImpulseNoise: return "impulse-noise";
        case CorruptionKind::Contrast: return "contrast";
        case CorruptionKind::Pixelate: return "pixelate";
    }
    return "?";
}

CorruptionKind parse_corruption(const std::string & s) {
    for (auto k : {CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise, CorruptionKind::Contrast,
                   CorruptionKind::Pixelate})
        if (s == corruption_name(k)) return k;
    throw DataError("unknown corruption '" + s + "'");
}

double CorruptionTable::parameter(CorruptionKind kind, int severity) const {
    if (severity < 1 || severity > 5) throw ContractError("corruption severity must be 1..5, got " + std::to_string(severity));
    const auto i = static_cast<std::size_t>(severity - 1);
    switch (kind) {
        case CorruptionKind::GaussianNoise: return gaussian_sigma[i];
        case CorruptionKind::ImpulseNoise: return impulse_p[i];
        case CorruptionKind::Contrast: return contrast_c[i];
        case CorruptionKind::Pixelate: return pixelate_k[i];
    }
    return 0.0;
}

std::string Corruption::name() const { return std::string(corruption_name(kind)) + "-" + std::to_string(severity); }

Tensor corrupt_image(const Tensor & image, CorruptionKind kind, double param, std::uint64_t seed, std::size_t index) {
    if (image.rank() != 3) throw ShapeError("corrupt_image: expected [H x W x C], got " + shape_str(image.shape()));
    const std::size_t h = image.shape()[0], w = image.shape()[1], ch = image.shape()[2];
    auto px = image.to_vector();
    std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(kind) + 7, index));
    std::uniform_real_distribution<double> U(0.0, 1.0);
    switch (kind) {
        case CorruptionKind::GaussianNoise: {
            if (param > 0) {
                std::normal_distribution<double> nd(0.0, param);
                for (auto & p : px) p += nd(rng);
            }
            break;
        }
        case CorruptionKind::ImpulseNoise: {
            for (auto & p : px) {
                const double r = U(rng);
                if (r < param) p = r < param / 2 ? 0.0 : 1.0;
            }
            break;
        }
        case CorruptionKind::Contrast: {
            for (std::size_t c = 0; c < ch; ++c) {
                double mu = 0;
                for (std::size_t i = c; i < px.size(); i += ch) mu += px[i];
                mu /= static_cast<double>(h * w);
                for (std::size_t i = c; i < px.size(); i += ch) px[i] = (px[i] - mu) * param + mu;
            }
            break;
        }
        case CorruptionKind::Pixelate: {
            const auto k = static_cast<std::size_t>(std::llround(param));
            if (k < 1) throw ContractError("pixelate: block size must be at least 1");
            const auto src = px;
            for (std::size_t by = 0; by < h; by += k)
                for (std::size_t bx = 0; bx < w; bx += k)
                    for (std::size_t c = 0; c < ch; ++c) {
                        const std::size_t ey = std::min(by + k, h), ex = std::min(bx + k, w);
                        double mean = 0;
                        for (std::size_t y = by; y < ey; ++y)
                            for (std::size_t x = bx; x < ex; ++x) mean += src[(y * w + x) * ch + c];
                        mean /= static_cast<double>((ey - by) * (ex - bx));
                        for (std::size_t y = by; y < ey; ++y)
                            for (std::size_t x = bx; x < ex; ++x) px[(y * w + x) * ch + c] = mean;
                    }
            break;
        }
    }
    for (auto & p : px) p = round_to_precision(std::clamp(p, 0.0, 1.0));
    return Tensor(image.shape(), std::move(px));
}

LabeledImages apply_corruption(const LabeledImages & data, const Corruption & c, const CorruptionTable & table) {
    const double param = table.parameter(c.kind, c.severity);
    LabeledImages out;
    out.labels = data.labels;
    for (std::size_t i = 0; i < data.size(); ++i)
        out.images.push_back(corrupt_image(data.images[i], c.kind, param, c.seed, i));
    return out;
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

std::size_t class_count(const std::vector<int> & labels) {
    int m = 0;
    for (int l : labels) m = std::max(m, l);
    return static_cast<std::size_t>(m) + 1;
}

// Minibatch cross-entropy training with Adam or momentum SGD, summed over one head per label set (labels[k] for heads[k]).
// The encoder is trained when `encoder` is true, the heads always.
void train_loop(const ViTConfig & config, ParamTree & params, std::vector<TaskHead> & heads,
                const LabeledImages & data, const std::vector<const std::vector<int> *> & labels, std::size_t epochs,
                double lr, const TrainConfig & cfg, std::uint64_t seed, bool encoder) {
    if (data.size() == 0) throw DataError("training set is empty");
    const std::size_t batch = cfg.batch;
    AdamConfig adam{lr};
    AdamState state;
    std::vector<std::vector<double>> velocity;
    const auto names = params.names();

    // frozen encoder: features are fixed, compute them once
    std::vector<Tensor> features;
    if (!encoder && epochs > 0) {
        for (std::size_t s = 0; s < data.size(); s += 64) {
            const std::size_t e = std::min(s + 64, data.size());
            Tape tape;
            features.push_back(encode(config, params, std::span(data.images).subspan(s, e - s), tape).value());
        }
    }

    for (std::size_t ep = 0; ep < epochs; ++ep) {
        const auto order = shuffled(data.size(), mix(seed, 0xE90C, ep));
        for (std::size_t s = 0; s < order.size(); s += batch) {
            const std::size_t e = std::min(s + batch, order.size());
            Tape tape;
            std::map<std::string, Var> leaves;
            Var feats;
            if (encoder) {
                std::vector<Tensor> imgs;
                for (std::size_t i = s; i < e; ++i) imgs.push_back(data.images[order[i]]);
                feats = encode(config, params, imgs, tape, &leaves);
            } else {
                std::vector<double> f;
                for (std::size_t i = s; i < e; ++i) {
                    const auto & chunk = features[order[i] / 64];
                    const auto row = chunk.data().subspan((order[i] % 64) * config.d_model, config.d_model);
                    f.insert(f.end(), row.begin(), row.end());
                }
                feats = tape.constant(Tensor({e - s, config.d_model}, std::move(f)));
            }
            std::vector<Var> hw, hb;
            Var loss;
            for (std::size_t k = 0; k < heads.size(); ++k) {
                std::vector<int> y;
                for (std::size_t i = s; i < e; ++i) y.push_back((*labels[k])[order[i]]);
                hw.push_back(tape.leaf(heads[k].weight));
                hb.push_back(tape.leaf(heads[k].bias));
                auto ce = ad::cross_entropy(classify(feats, hw[k], hb[k]), y);
                loss = k == 0 ? ce : ad::add(loss, ce);
            }
            const auto g = tape.backward(loss);

            std::vector<Tensor> p, gr;
            if (encoder) {
                for (const auto & n : names) {
                    p.push_back(params.at(n));
                    gr.push_back(g.of(leaves.at(n)));
                }
            }
            for (std::size_t k = 0; k < heads.size(); ++k) {
                p.push_back(heads[k].weight);
                gr.push_back(g.of(hw[k]));
                p.push_back(heads[k].bias);
                gr.push_back(g.of(hb[k]));
            }
            if (cfg.optimizer == Optimizer::Adam) {
                adam_step(p, gr, state, adam);
            } else {
                if (velocity.empty())
                    for (const auto & t : p) velocity.emplace_back(t.size(), 0.0);
                for (std::size_t k = 0; k < p.size(); ++k) {
                    auto x = p[k].to_vector();
                    const auto g = gr[k].data();
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        velocity[k][i] = cfg.momentum * velocity[k][i] + g[i];
                        x[i] = round_to_precision(x[i] - lr * velocity[k][i]);
                    }
                    p[k] = Tensor(p[k].shape(), std::move(x));
                }
            }
            const std::size_t off = encoder ? names.size() : 0;
            if (encoder)
                for (std::size_t k = 0; k < names.size(); ++k) params.set(names[k], p[k]);
            for (std::size_t k = 0; k < heads.size(); ++k) {
                heads[k].weight = p[off + 2 * k];
                heads[k].bias = p[off + 2 * k + 1];
            }
        }
    }
}

} // namespace

ParamTree pretrain(const ViTConfig & config, const LabeledImages & data, const TrainConfig & cfg) {
    config.validate();
    auto params = init_vit(config, cfg.seed);
    std::vector<const std::vector<int> *> labels{&data.labels};
    for (const auto & a : data.aux_labels) labels.push_back(&a);
    std::vector<TaskHead> heads;
    for (std::size_t k = 0; k < labels.size(); ++k)
        heads.push_back(init_head(config, -1, class_count(*labels[k]), mix(cfg.seed, 0x4EAD, k)));
    train_loop(config, params, heads, data, labels, cfg.epochs, cfg.lr, cfg, mix(cfg.seed, 0x97E), true);
    return params;
}

Expert finetune(const ViTConfig & config, const ParamTree & theta_0, const LabeledImages & train, std::size_t classes,
                int task_id, const TrainConfig & cfg) {
    Expert ex;
    ex.params = theta_0;
    ex.head = init_head(config, task_id, classes, mix(cfg.seed, 0x4EAD, static_cast<std::uint64_t>(task_id) + 1));
    if (cfg.epochs > 0) {
        std::vector<TaskHead> heads{ex.head};
        const std::vector<const std::vector<int> *> labels{&train.labels};
        train_loop(config, ex.params, heads, train, labels, cfg.head_epochs, cfg.head_lr, cfg, mix(cfg.seed, 1),
                   false);
        train_loop(config, ex.params, heads, train, labels, cfg.epochs, cfg.lr, cfg, mix(cfg.seed, 2), true);
        ex.head = heads.front();
        ex.train_accuracy = evaluate_accuracy(config, ex.params, ex.head, train);
    }
    ex.head.frozen = true;
    return ex;
}

namespace {

int argmax(std::span<const double> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace

std::vector<int> predict(const ViTConfig & config, const ParamTree & params, const TaskHead & head,
                         const std::vector<Tensor> & images, std::size_t batch) {
    if (batch == 0) throw ContractError("predict: batch must be positive");
    std::vector<int> out;
    for (std::size_t s = 0; s < images.size(); s += batch) {
        const std::size_t e = std::min(s + batch, images.size());
        Tape tape;
        auto feats = encode(config, params, std::span(images).subspan(s, e - s), tape);
        const auto logits = classify(feats, tape.constant(head.weight), tape.constant(head.bias)).value();
        for (std::size_t i = 0; i < e - s; ++i) out.push_back(argmax(logits.data().subspan(i * head.classes(), head.classes())));
    }
    return out;
}

std::vector<int> predict(const MergedModel & model, const TaskHead & head, const std::vector<Tensor> & images) {
    std::vector<int> out;
    for (const auto & img : images) {
        const auto logits = merged_logits(model, img, head);
        out.push_back(argmax(logits.data()));
    }
    return out;
}

double accuracy(const std::vector<int> & predicted, const std::vector<int> & labels) {
    if (predicted.size() != labels.size()) throw ShapeError("accuracy: prediction and label counts differ");
    if (labels.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += predicted[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

double evaluate_accuracy(const ViTConfig & config, const ParamTree & params, const TaskHead & head,
                         const LabeledImages & data, std::size_t batch) {
    return accuracy(predict(config, params, head, data.images, batch), data.labels);
}

double evaluate_accuracy(const MergedModel & model, const TaskHead & head, const LabeledImages & data) {
    return accuracy(predict(model, head, data.images), data.labels);
}

double evaluate_loss(const ViTConfig & config, const ParamTree & params, const TaskHead & head,
                     const LabeledImages & data, std::size_t batch) {
    if (data.size() == 0) throw DataError("evaluate_loss: empty dataset");
    double total = 0.0;
    for (std::size_t s = 0; s < data.size(); s += batch) {
        const std::size_t e = std::min(s + batch, data.size());
        Tape tape;
        auto feats = encode(config, params, std::span(data.images).subspan(s, e - s), tape);
        auto ce = ad::cross_entropy(classify(feats, tape.constant(head.weight), tape.constant(head.bias)),
                                    std::span(data.labels).subspan(s, e - s));
        total += ce.value().item() * static_cast<double>(e - s);
    }
    return total / static_cast<double>(data.size());
}

// ---- task store

std::size_t TaskStore::add(TaskDataset dataset) {
    datasets_.push_back(std::move(dataset));
    experts_.emplace_back();
    tvs_.emplace_back();
    return datasets_.size() - 1;
}

void TaskStore::set_expert(std::size_t task, Expert expert, TaskVector tv) {
    if (task >= size()) throw ContractError("task store: no task " + std::to_string(task));
    experts_[task] = std::move(expert);
    tvs_[task] = std::move(tv);
}

bool TaskStore::has_expert(std::size_t task) const { return task < size() && experts_[task].has_value(); }

void TaskStore::record(std::size_t task, AccessKind kind) const {
    if (task >= size()) throw ContractError("task store: no task " + std::to_string(task));
    log_.push_back({task, kind});
}

const SyntheticTaskSpec & TaskStore::spec(std::size_t task) const {
    if (task >= size()) throw ContractError("task store: no task " + std::to_string(task));
    return datasets_[task].spec;
}

const LabeledImages & TaskStore::train(std::size_t task) const {
    record(task, AccessKind::Train);
    return datasets_[task].train;
}

const LabeledImages & TaskStore::test(std::size_t task) const {
    record(task, AccessKind::Test);
    return datasets_[task].test;
}

const TaskVector & TaskStore::task_vector(std::size_t task) const {
    record(task, AccessKind::TaskVector);
    if (!tvs_[task]) throw ContractError("task store: task " + std::to_string(task) + " has no expert");
    return *tvs_[task];
}

const Expert & TaskStore::expert(std::size_t task) const {
    // an expert's weights carry its task vector
    record(task, AccessKind::TaskVector);
    if (!experts_[task]) throw ContractError("task store: task " + std::to_string(task) + " has no expert");
    return *experts_[task];
}

const TaskHead & TaskStore::head(std::size_t task) const {
    record(task, AccessKind::Head);
    if (!experts_[task]) throw ContractError("task store: task " + std::to_string(task) + " has no expert");
    return experts_[task]->head;
}

bool TaskStore::accessed(std::size_t task, AccessKind kind) const {
    return std::any_of(log_.begin(), log_.end(), [&](const Access & a) { return a.task == task && a.kind == kind; });
}

// ---- benchmark

BenchConfig BenchConfig::standard(std::uint64_t seed) {
    BenchConfig c;
    c.arch.image_size = 16;
    c.arch.patch_size = 4;
    c.arch.d_model = 32;
    c.arch.n_heads = 4;
    c.arch.n_blocks = 4;
    c.arch.mlp_hidden = 128;
    c.families = {TaskFamily::StripeOrientation, TaskFamily::CheckerFrequency, TaskFamily::RingRadius,
                  TaskFamily::CornerQuadrant};
    c.pretrain_cfg.epochs = 8;
    c.pretrain_cfg.lr = 1e-3;
    c.pretrain_cfg.seed = 0xBA5E;
    // Plain momentum SGD, head trained jointly from random init. Adam spreads the update evenly over
    // all weights, which leaves nothing for magnitude pruning to separate.
    c.finetune_cfg.optimizer = Optimizer::SgdMomentum;
    c.finetune_cfg.epochs = 8;
    c.finetune_cfg.head_epochs = 0;
    c.finetune_cfg.lr = 0.01;
    c.wemoe.strategy = UpscaleStrategy::MlpOnly;
    c.ewemoe.rho = 0.9;
    c.ewemoe.shared_router = true;
    c.seed = seed;
    return c;
}

ParamTree pretrain_base(const BenchConfig & cfg) {
    return pretrain(cfg.arch, generate_generic_shapes(cfg.arch.image_size, cfg.pretrain_size, cfg.pretrain_cfg.seed),
                    cfg.pretrain_cfg);
}

SyntheticTaskSpec task_spec(const BenchConfig & cfg, std::size_t task) {
    if (task >= cfg.families.size()) throw ContractError("task index " + std::to_string(task) + " out of range");
    SyntheticTaskSpec s;
    s.family = cfg.families[task];
    s.classes = cfg.classes;
    s.train_size = cfg.train_size;
    s.test_size = cfg.test_size;
    s.noise = cfg.noise;
    s.seed = mix(cfg.seed, 0x7A5C, task);
    s.image_size = cfg.arch.image_size;
    return s;
}

TrainConfig finetune_config(const BenchConfig & cfg, std::size_t task) {
    auto f = cfg.finetune_cfg;
    f.seed = mix(cfg.seed, 0xF1E, task);
    return f;
}

Workbench prepare_workbench(const BenchConfig & cfg, const ParamTree * theta_0) {
    cfg.arch.validate();
    if (cfg.families.size() < 2) throw ContractError("benchmark needs at least 2 tasks");
    Workbench wb;
    wb.config = cfg;
    for (std::size_t i = 0; i < cfg.families.size(); ++i) wb.store.add(generate_task_dataset(task_spec(cfg, i)));
    wb.theta_0 = theta_0 ? *theta_0 : pretrain_base(cfg);
    for (std::size_t i = 0; i < wb.store.size(); ++i) {
        auto ex = finetune(cfg.arch, wb.theta_0, wb.store.train(i), cfg.classes, static_cast<int>(i),
                           finetune_config(cfg, i));
        auto tv = compute_task_vector(ex.params, wb.theta_0, static_cast<int>(i));
        wb.store.set_expert(i, std::move(ex), std::move(tv));
    }
    wb.store.clear_log();
    return wb;
}

const char * method_name(Method m) {
    switch (m) {
        case Method::Pretrained: return "pretrained";
        case Method::Individual: return "individual";
        case Method::WeightAverage: return "weight-averaging";
        case Method::TaskArithmetic: return "task-arithmetic";
        case Method::WEMoE: return "wemoe";
        case Method::EWEMoE: return "e-wemoe";
    }
    return "?";
}

Method parse_method(const std::string & s) {
    for (auto m : {Method::Pretrained, Method::Individual, Method::WeightAverage, Method::TaskArithmetic, Method::WEMoE,
                   Method::EWEMoE})
        if (s == method_name(m)) return m;
    throw DataError("unknown method '" + s + "'");
}

const char * protocol_name(Protocol p) {
    switch (p) {
        case Protocol::Standard: return "standard";
        case Protocol::Generalization: return "generalization";
        case Protocol::Robustness: return "robustness";
    }
    return "?";
}

Protocol parse_protocol(const std::string & s) {
    for (auto p : {Protocol::Standard, Protocol::Generalization, Protocol::Robustness})
        if (s == protocol_name(p)) return p;
    throw DataError("unknown protocol '" + s + "'");
}

double ReportRow::average() const {
    if (accuracy.empty()) return 0.0;
    return std::accumulate(accuracy.begin(), accuracy.end(), 0.0) / static_cast<double>(accuracy.size());
}

const ReportRow & BenchReport::row(const std::string & method, const std::string & condition) const {
    for (const auto & r : rows)
        if (r.method == method && r.condition == condition) return r;
    throw ContractError("report has no row " + method + "/" + condition);
}

MergedModel build_dynamic(const Workbench & wb, Method method, const std::vector<std::size_t> & tasks) {
    if (method != Method::WEMoE && method != Method::EWEMoE)
        throw ContractError(std::string("build_dynamic: ") + method_name(method) + " is not a dynamic method");
    std::vector<TaskVector> tvs;
    std::vector<TaskHead> heads;
    for (auto t : tasks) {
        tvs.push_back(wb.store.task_vector(t));
        heads.push_back(wb.store.head(t));
    }
    auto cfg = method == Method::WEMoE ? wb.config.wemoe : wb.config.ewemoe;
    cfg.seed = mix(wb.config.seed, 0x2077, static_cast<std::uint64_t>(method));
    return upscale_to_wemoe(wb.config.arch, wb.theta_0, tvs, heads, cfg);
}

ParamTree build_static(const Workbench & wb, Method method, const std::vector<std::size_t> & tasks) {
    switch (method) {
        case Method::Pretrained: return wb.theta_0;
        case Method::WeightAverage: {
            std::vector<ParamTree> experts;
            for (auto t : tasks) experts.push_back(wb.store.expert(t).params);
            return merge_weight_average(experts);
        }
        case Method::TaskArithmetic: {
            std::vector<TaskVector> tvs;
            for (auto t : tasks) tvs.push_back(wb.store.task_vector(t));
            return merge_task_arithmetic(wb.theta_0, tvs, wb.config.ta_lambda);
        }
        default: throw ContractError(std::string("build_static: ") + method_name(method) + " is not a static merge");
    }
}

namespace {

struct Condition {
    std::string name;
    std::optional<Corruption> corruption;
};

} // namespace

BenchReport run_merge_benchmark(const Workbench & wb, const std::vector<Method> & methods, Protocol protocol,
                                const ProtocolOptions & opt) {
    const auto & store = wb.store;
    const auto & cfg = wb.config;
    if (store.size() < 2) throw ContractError("benchmark needs at least 2 tasks");

    std::vector<std::size_t> merged, evaluated(store.size());
    std::iota(evaluated.begin(), evaluated.end(), std::size_t{0});
    if (protocol == Protocol::Generalization) {
        merged = opt.seen;
        std::sort(merged.begin(), merged.end());
        merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
        if (merged.empty() || merged.size() >= store.size())
            throw ContractError("generalization needs at least one seen and one unseen task");
        if (merged.back() >= store.size()) throw ContractError("seen task index out of range");
        for (auto m : methods)
            if (m == Method::Individual) throw ContractError("individual experts are undefined for unseen tasks");
    } else {
        merged = evaluated;
    }
    if (protocol == Protocol::Robustness && opt.corruptions.empty())
        throw ContractError("robustness protocol needs at least one corruption");

    BenchReport rep;
    rep.protocol = protocol;
    for (auto t : evaluated) {
        std::string name = store.spec(t).name();
        if (protocol == Protocol::Generalization && !std::binary_search(merged.begin(), merged.end(), t))
            name += " (unseen)";
        rep.tasks.push_back(name);
    }

    std::vector<Condition> conditions{{"clean", std::nullopt}};
    if (protocol == Protocol::Robustness)
        for (const auto & c : opt.corruptions) conditions.push_back({c.name(), c});

    for (const auto & cond : conditions) {
        std::vector<LabeledImages> test;
        for (auto t : evaluated)
            test.push_back(cond.corruption ? apply_corruption(store.test(t), *cond.corruption, opt.table) : store.test(t));

        for (auto m : methods) {
            ReportRow row;
            row.method = method_name(m);
            row.condition = cond.name;
            switch (m) {
                case Method::Individual:
                    for (auto t : evaluated) {
                        const auto & ex = store.expert(t);
                        row.accuracy.push_back(evaluate_accuracy(cfg.arch, ex.params, ex.head, test[t]));
                    }
                    break;
                case Method::Pretrained:
                case Method::WeightAverage:
                case Method::TaskArithmetic: {
                    const auto tree = build_static(wb, m, merged);
                    for (auto t : evaluated) row.accuracy.push_back(evaluate_accuracy(cfg.arch, tree, store.head(t), test[t]));
                    break;
                }
                case Method::WEMoE:
                case Method::EWEMoE: {
                    const auto model = build_dynamic(wb, m, merged);
                    std::vector<std::vector<Tensor>> unlabeled;
                    for (auto t : merged) unlabeled.push_back(opt.tta_on_clean ? store.test(t).images : test[t].images);
                    auto tcfg = cfg.tta;
                    tcfg.seed = mix(cfg.seed, 0x77A, static_cast<std::uint64_t>(m));
                    auto res = tta_train(model, unlabeled, tcfg);
                    for (auto t : evaluated) row.accuracy.push_back(evaluate_accuracy(res.model, store.head(t), test[t]));
                    if (!cond.corruption) {
                        rep.traces[row.method] = std::move(res.trace);
                        rep.adapted.emplace(row.method, std::move(res.model));
                    }
                    break;
                }
            }
            rep.rows.push_back(std::move(row));
        }
    }
    return rep;
}

void write_markdown(std::ostream & os, const BenchReport & rep) {
    os << "| method | condition |";
    for (const auto & t : rep.tasks) os << ' ' << t << " |";
    os << " avg |\n|---|---|";
    for (std::size_t i = 0; i < rep.tasks.size(); ++i) os << "---|";
    os << "---|\n";
    os << std::fixed << std::setprecision(1);
    for (const auto & r : rep.rows) {
        os << "| " << r.method << " | " << r.condition << " |";
        for (double a : r.accuracy) os << ' ' << 100.0 * a << " |";
        os << ' ' << 100.0 * r.average() << " |\n";
    }
    os << std::defaultfloat;
}

void write_csv(std::ostream & os, const BenchReport & rep) {
    os << "method,condition";
    for (const auto & t : rep.tasks) os << ',' << t;
    os << ",average\n";
    os << std::fixed << std::setprecision(6);
    for (const auto & r : rep.rows) {
        os << r.method << ',' << r.condition;
        for (double a : r.accuracy) os << ',' << a;
        os << ',' << r.average() << '\n';
    }
    os << std::defaultfloat;
}

} // namespace wemoe
