#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "spire/model.hpp"

using namespace spire;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.image_side = 4;
    c.stage_widths = {2};
    c.blocks_per_stage = 1;
    c.stem_kernel = 3;
    c.siren_width = 2;
    c.siren_layers = 1;
    c.omega0 = 3.0;
    c.q_scale = 5.0;
    return c;
}

ModelConfig small_config() {
    ModelConfig c;
    c.image_side = 16;
    c.stage_widths = {4, 8};
    c.siren_width = 16;
    c.q_scale = 8.0;
    return c;
}

std::vector<double> random_image(int side, std::uint64_t seed) {
    std::vector<double> img(static_cast<std::size_t>(side) * side);
    Rng rng = make_rng(seed, 0);
    for (auto& v : img) v = 3.0 * uniform01(rng);
    return img;
}

std::vector<double> random_params(const Model& m, std::uint64_t seed, double scale = 0.5) {
    std::vector<double> p(m.parameter_count());
    Rng rng = make_rng(seed, 0);
    for (auto& v : p) v = scale * (2.0 * uniform01(rng) - 1.0);
    return p;
}

double param(const Model& m, const std::vector<double>& p, const std::string& block, std::size_t i) {
    return p[m.layout().block(block).offset + i];
}

// Direct convolution, single image, channels-first planes [c][y][x], weights
// [cout][ky][kx][cin].
using Planes = std::vector<std::vector<double>>;
Planes conv(const Model& m, const std::vector<double>& p, const std::string& name, const Planes& in, int side,
            int k, int stride, int pad, int cout, int& out_side) {
    const int cin = static_cast<int>(in.size());
    out_side = (side + 2 * pad - k) / stride + 1;
    Planes out(static_cast<std::size_t>(cout), std::vector<double>(static_cast<std::size_t>(out_side) * out_side));
    for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < out_side; ++oy)
            for (int ox = 0; ox < out_side; ++ox) {
                double acc = param(m, p, name + ".bias", static_cast<std::size_t>(co));
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx)
                        for (int ci = 0; ci < cin; ++ci) {
                            const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                            if (iy < 0 || ix < 0 || iy >= side || ix >= side) continue;
                            const std::size_t wi = ((static_cast<std::size_t>(co) * k + ky) * k + kx) * cin + ci;
                            acc += param(m, p, name + ".weight", wi) * in[ci][static_cast<std::size_t>(iy) * side + ix];
                        }
                out[co][static_cast<std::size_t>(oy) * out_side + ox] = acc;
            }
    return out;
}

void relu(Planes& x) {
    for (auto& c : x)
        for (auto& v : c) v = std::max(v, 0.0);
}

// Hand forward pass of the toy trunk: stem 3×3/2 → relu → one identity
// residual block → global mean → affine head.
std::vector<double> toy_trunk_oracle(const Model& m, const std::vector<double>& p, const std::string& net,
                                     const std::vector<double>& img, int n_out) {
    int s1 = 0, s2 = 0, s3 = 0;
    Planes x = conv(m, p, net + ".stem", Planes{img}, 4, 3, 2, 1, 2, s1);
    relu(x);
    Planes h = conv(m, p, net + ".stage0.block0.conv1", x, s1, 3, 1, 1, 2, s2);
    relu(h);
    Planes o = conv(m, p, net + ".stage0.block0.conv2", h, s2, 3, 1, 1, 2, s3);
    for (std::size_t c = 0; c < o.size(); ++c)
        for (std::size_t i = 0; i < o[c].size(); ++i) o[c][i] += x[c][i];
    relu(o);
    std::vector<double> pooled(2);
    for (int c = 0; c < 2; ++c) {
        for (double v : o[c]) pooled[c] += v;
        pooled[c] /= static_cast<double>(o[c].size());
    }
    std::vector<double> out(static_cast<std::size_t>(n_out));
    for (int r = 0; r < n_out; ++r) {
        out[r] = param(m, p, net + ".head.bias", static_cast<std::size_t>(r));
        for (int c = 0; c < 2; ++c) out[r] += param(m, p, net + ".head.weight", static_cast<std::size_t>(r) * 2 + c) * pooled[c];
    }
    return out;
}

// Hand evaluation of a width-2, one-hidden-layer symmetrized decoder.
double toy_siren_oracle(const Model& m, const std::vector<double>& p, const Vec3& q) {
    const auto branch = [&](const Vec3& x) {
        double o = param(m, p, "decoder.out.bias", 0);
        for (int j = 0; j < 2; ++j) {
            double z = param(m, p, "decoder.hidden0.bias", static_cast<std::size_t>(j));
            for (int k = 0; k < 3; ++k) z += param(m, p, "decoder.hidden0.weight", static_cast<std::size_t>(j) * 3 + k) * x[k];
            o += param(m, p, "decoder.out.weight", static_cast<std::size_t>(j)) * std::sin(m.config().omega0 * z);
        }
        return std::max(o, 0.0);
    };
    const Vec3 x = m.config().q_scale * q;
    return branch(x) + branch(-x);
}

void zero_block(const Model& m, std::vector<double>& p, const std::string& name) {
    const auto& b = m.layout().block(name);
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(b.offset), p.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size), 0.0);
}

}  // namespace

TEST(Layout, IndexMapIsBijective) {
    const Model m(ModelConfig{});
    std::size_t next = 0;
    std::set<std::string> names;
    for (const auto& b : m.layout().blocks()) {
        EXPECT_EQ(b.offset, next);
        std::size_t n = 1;
        for (int d : b.shape) n *= static_cast<std::size_t>(d);
        EXPECT_EQ(b.size, n);
        next += b.size;
        EXPECT_TRUE(names.insert(b.name).second);
        EXPECT_EQ(&m.layout().block_of(b.offset), &m.layout().block(b.name));
    }
    EXPECT_EQ(next, m.parameter_count());
    EXPECT_EQ(m.layout().block("encoder.head.weight").shape, (std::vector<int>{6, 64}));
    EXPECT_EQ(m.layout().block("fluence.head.weight").shape, (std::vector<int>{1, 64}));
    int hidden = 0;
    for (const auto& b : m.layout().blocks()) hidden += b.name.starts_with("decoder.hidden") && b.name.ends_with(".weight");
    EXPECT_EQ(hidden, 5);
    EXPECT_EQ(m.layout().block("decoder.hidden1.weight").shape, (std::vector<int>{256, 256}));
}

TEST(Layout, RoundTripThroughNamedBlocks) {
    const Model m(small_config());
    const auto p = m.init_params<double>(3);
    // scatter into a map keyed by block name, then rebuild the flat vector
    std::map<std::string, std::vector<double>> named;
    for (const auto& b : m.layout().blocks())
        named[b.name].assign(p.begin() + static_cast<std::ptrdiff_t>(b.offset), p.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size));
    std::vector<double> q(m.parameter_count(), -1.0);
    for (const auto& b : m.layout().blocks()) std::copy(named[b.name].begin(), named[b.name].end(), q.begin() + static_cast<std::ptrdiff_t>(b.offset));
    const auto img = random_image(16, 1);
    const auto r1 = m.encoder_forward<double>(p, img), r2 = m.encoder_forward<double>(q, img);
    EXPECT_EQ(r1.matrix(), r2.matrix());
}

TEST(Encoder, DeterministicAndOrthonormal) {
    const Model m(small_config());
    const auto pd = m.init_params<double>(5);
    const auto pf = m.init_params<float>(5);
    const auto img = random_image(16, 2);
    std::vector<float> imgf(img.begin(), img.end());
    const auto a = m.encoder_forward<double>(pd, img), b = m.encoder_forward<double>(pd, img);
    EXPECT_EQ(a.matrix(), b.matrix());
    const Mat3 ra = a.matrix();
    EXPECT_LT((ra.transpose() * ra - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    const Mat3 rf = m.encoder_forward<float>(pf, imgf).matrix();
    EXPECT_LT((rf.transpose() * rf - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Encoder, ZeroHeadWithIdentityBias) {
    const Model m(small_config());
    auto p = m.init_params<double>(6);
    zero_block(m, p, "encoder.head.weight");
    const auto& b = m.layout().block("encoder.head.bias");
    const double e[] = {1, 0, 0, 0, 1, 0};
    for (int k = 0; k < 6; ++k) p[b.offset + k] = e[k];
    for (std::uint64_t s = 0; s < 5; ++s)
        EXPECT_EQ(m.encoder_forward<double>(p, random_image(16, s)).matrix(), Mat3::Identity());
}

TEST(Encoder, ToyManualForwardPass) {
    const Model m(toy_config());
    const auto p = random_params(m, 7);
    const auto img = random_image(4, 3);
    const auto expect = toy_trunk_oracle(m, p, "encoder", img, 6);
    const nn::Matrix<double> row = Eigen::Map<const nn::Matrix<double>>(img.data(), 1, 16);
    const auto raw = m.encoder_raw<double>(p, row);
    for (int k = 0; k < 6; ++k) EXPECT_NEAR(raw(k, 0), expect[k], 1e-14);
    std::array<double, 6> six;
    std::copy(expect.begin(), expect.end(), six.begin());
    EXPECT_LT((m.encoder_forward<double>(p, img).matrix() - six_d_to_rotation(six).matrix()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Encoder, WrongShapesRejected) {
    const Model m(small_config());
    const auto p = m.init_params<double>(1);
    EXPECT_THROW(m.encoder_forward<double>(p, random_image(8, 1)), ShapeError);
    const std::vector<double> short_p(p.begin(), p.end() - 1);
    EXPECT_THROW(m.encoder_forward<double>(short_p, random_image(16, 1)), ShapeError);
}

TEST(Fluence, HeadExamples) {
    const Model m(small_config());
    auto p = m.init_params<double>(8);
    zero_block(m, p, "fluence.head.weight");
    zero_block(m, p, "fluence.head.bias");
    EXPECT_EQ(m.fluence_forward<double>(p, random_image(16, 1)), 0.0);
    p[m.layout().block("fluence.head.bias").offset] = 1.5;
    for (std::uint64_t s = 0; s < 4; ++s) EXPECT_DOUBLE_EQ(m.fluence_forward<double>(p, random_image(16, s)), 1.5);
    p[m.layout().block("fluence.head.bias").offset] = -2.0;
    EXPECT_EQ(m.fluence_forward<double>(p, random_image(16, 1)), 0.0);
}

TEST(Fluence, ToyManualForwardPass) {
    const Model m(toy_config());
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto p = random_params(m, 100 + s);
        const auto img = random_image(4, s);
        const double expect = std::max(toy_trunk_oracle(m, p, "fluence", img, 1)[0], 0.0);
        EXPECT_NEAR(m.fluence_forward<double>(p, img), expect, 1e-14);
        EXPECT_GE(m.fluence_forward<double>(p, img), 0.0);
    }
}

TEST(Siren, ExactInversionSymmetry) {
    ModelConfig cfg = small_config();
    cfg.siren_width = 32;
    const Model m(cfg);
    const auto p = m.init_params<double>(9);
    Rng rng = make_rng(10, 0);
    for (int t = 0; t < 1000; ++t) {
        const Vec3 q = Vec3(uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5) * 0.3;
        const double a = m.siren_forward<double>(p, q), b = m.siren_forward<double>(p, -q);
        ASSERT_EQ(a, b);
        ASSERT_GE(a, 0.0);
    }
}

TEST(Siren, ZeroParamsGiveZero) {
    const Model m(small_config());
    const std::vector<double> p(m.parameter_count(), 0.0);
    Rng rng = make_rng(11, 0);
    for (int t = 0; t < 50; ++t) EXPECT_EQ(m.siren_forward<double>(p, Vec3(uniform01(rng), uniform01(rng), uniform01(rng))), 0.0);
}

TEST(Siren, ToyManualEvaluation) {
    const Model m(toy_config());
    Rng rng = make_rng(12, 0);
    int positive = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto p = random_params(m, 200 + s, 1.0);
        const Vec3 q(uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5);
        const double expect = toy_siren_oracle(m, p, q);
        positive += expect > 0;
        EXPECT_NEAR(m.siren_forward<double>(p, q), expect, 1e-14);
    }
    EXPECT_GT(positive, 5);
}

TEST(IntensityFromY, Examples) {
    EXPECT_EQ(intensity_from_y(0.0), 0.0);
    EXPECT_NEAR(intensity_from_y(std::log(2.0)), 1.0, 1e-15);
    Rng rng = make_rng(13, 0);
    for (int t = 0; t < 1000; ++t) {
        const double y = 10.0 * uniform01(rng);
        EXPECT_NEAR(std::log1p(intensity_from_y(y)), y, 1e-12);
        EXPECT_GE(intensity_from_y(y), 0.0);
    }
}

TEST(PredictPattern, Examples) {
    const Model m(toy_config());
    const auto p = random_params(m, 14, 1.0);
    const QGrid q = build_qgrid(DetectorGeometry(8, 0.1 / 8, 0.2, 4.6));
    const Rotation r = Rotation::exp(Vec3(0.4, 0.2, -0.9));
    for (double v : m.predict_pattern<double>(p, r, q, 0.0).pixels) EXPECT_EQ(v, 0.0);
    const std::vector<double> zero(m.parameter_count(), 0.0);
    for (double v : m.predict_pattern<double>(zero, r, q, 2.0).pixels) EXPECT_EQ(v, 0.0);
    const auto img = m.predict_pattern<double>(p, r, q, 1.7);
    const Mat3 rt = r.matrix().transpose();
    for (std::size_t k = 0; k < q.size(); ++k) {
        const double expect = 1.7 * std::expm1(toy_siren_oracle(m, p, rt * q.coords[k]));
        EXPECT_NEAR(img.pixels[k], expect, 1e-12 * std::max(1.0, expect));
        EXPECT_GE(img.pixels[k], 0.0);
    }
}

TEST(DecoderVolume, MatchesPointEvaluation) {
    const Model m(toy_config());
    const auto p = random_params(m, 15, 1.0);
    const Rotation g = Rotation::exp(Vec3(0.1, -0.5, 0.3));
    const auto vol = m.decoder_volume<double>(p, 6, 0.05, g.matrix());
    for (int a = 0; a < 6; ++a)
        for (int b = 0; b < 6; ++b)
            for (int c = 0; c < 6; ++c) {
                const Vec3 q = Vec3(a - 3, b - 3, c - 3) * 0.05;
                EXPECT_NEAR(vol.grid(a, b, c), std::expm1(toy_siren_oracle(m, p, g.matrix() * q)), 1e-12);
            }
}

TEST(Continuity, FiniteDifferencesExist) {
    const Model m(toy_config());
    auto p = random_params(m, 16, 1.0);
    const auto img = random_image(4, 4);
    Rng rng = make_rng(17, 0);
    std::vector<double> dir(p.size());
    for (auto& d : dir) d = 2.0 * uniform01(rng) - 1.0;
    const auto f = [&](double t) {
        std::vector<double> x = p;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += t * dir[i];
        return m.fluence_forward<double>(x, img) + m.siren_forward<double>(x, Vec3(0.05, -0.02, 0.03));
    };
    const double d1 = (f(1e-4) - f(-1e-4)) / 2e-4, d2 = (f(1e-5) - f(-1e-5)) / 2e-5;
    EXPECT_TRUE(std::isfinite(d1));
    EXPECT_NEAR(d1, d2, 1e-4 * std::max(1.0, std::abs(d2)));
}

TEST(Encoder, OutputIndependentOfParameterAddress) {
    const Model m(small_config());
    const auto p = m.init_params<double>(21);
    const auto img = random_image(16, 22);
    const Mat3 ref = m.encoder_forward<double>(p, img).matrix();
    const double y_ref = m.siren_forward<double>(p, Vec3(0.01, 0.02, -0.03));
    for (std::size_t shift = 1; shift < 8; ++shift) {
        std::vector<double> buf(p.size() + shift);
        std::copy(p.begin(), p.end(), buf.begin() + static_cast<std::ptrdiff_t>(shift));
        const std::span<const double> view(buf.data() + shift, p.size());
        EXPECT_EQ(m.encoder_forward<double>(view, img).matrix(), ref);
        EXPECT_EQ(m.siren_forward<double>(view, Vec3(0.01, 0.02, -0.03)), y_ref);
    }
}
