#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "spire/io.hpp"

using namespace spire;
using namespace spire::io;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("spire_io_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

Container sample_container() {
    Json extra = Json::object();
    extra["note"] = "x";
    return make_container<double>("density", {2, 3}, std::vector<double>{1.5, -2.0, 0.0, 1e-300, 3.25, -0.0}, extra);
}

template <class F>
std::size_t offset_of(F&& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.offset();
    }
    return static_cast<std::size_t>(-1);
}

}  // namespace

TEST(Container, RoundTripIsBitExact) {
    const Container c = sample_container();
    const auto bytes = serialize(c);
    EXPECT_EQ(std::memcmp(bytes.data(), "SPI1", 4), 0);
    std::uint32_t len;
    std::memcpy(&len, bytes.data() + 4, 4);
    EXPECT_EQ(bytes.size(), 8 + len + 6 * sizeof(double));
    const Container d = deserialize(bytes);
    EXPECT_EQ(d.header, c.header);
    EXPECT_EQ(d.payload, c.payload);
    EXPECT_EQ(serialize(d), bytes);
    const auto v = d.values<double>();
    EXPECT_TRUE(std::signbit(v[5]));
    EXPECT_EQ(v[3], 1e-300);
    EXPECT_EQ(d.role(), "density");
    EXPECT_EQ(d.shape(), (std::vector<std::size_t>{2, 3}));
}

TEST(Container, DtypesAndConversions) {
    const auto f = make_container<float>("x", {3}, std::vector<float>{1.f, 2.5f, -4.f});
    EXPECT_EQ(deserialize(serialize(f)).values<double>(), (std::vector<double>{1.0, 2.5, -4.0}));
    const auto u = make_container<std::uint8_t>("mask", {4}, std::vector<std::uint8_t>{0, 1, 1, 0});
    EXPECT_EQ(deserialize(serialize(u)).values<std::uint8_t>(), (std::vector<std::uint8_t>{0, 1, 1, 0}));
    const auto i = make_container<std::int64_t>("ids", {2}, std::vector<std::int64_t>{-7, 1LL << 40});
    EXPECT_EQ(deserialize(serialize(i)).values<std::int64_t>(), (std::vector<std::int64_t>{-7, 1LL << 40}));
    EXPECT_THROW(deserialize(serialize(u)).values<double>(), ShapeError);
    EXPECT_THROW(make_container<double>("x", {2, 2}, std::vector<double>{1.0}), ShapeError);
    const auto empty = make_container<double>("x", {0}, std::vector<double>{});
    EXPECT_TRUE(deserialize(serialize(empty)).values<double>().empty());
}

TEST(Container, BadMagic) {
    auto bytes = serialize(sample_container());
    bytes[2] = 'X';
    EXPECT_THROW(deserialize(bytes), BadMagicError);
    EXPECT_EQ(offset_of([&] { deserialize(bytes); }), 2u);
    bytes[0] = 'Q';
    EXPECT_EQ(offset_of([&] { deserialize(bytes); }), 0u);
}

TEST(Container, TruncationAtEveryPrefix) {
    const auto bytes = serialize(sample_container());
    for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
        const std::span<const std::uint8_t> prefix(bytes.data(), cut);
        EXPECT_THROW(deserialize(prefix), TruncatedError) << "prefix " << cut;
    }
    try {
        deserialize(std::span<const std::uint8_t>(bytes.data(), bytes.size() - 5));
        FAIL();
    } catch (const TruncatedError& e) {
        EXPECT_EQ(e.expected(), 48u);
        EXPECT_EQ(e.actual(), 43u);
    }
}

TEST(Container, TrailingBytes) {
    auto bytes = serialize(sample_container());
    const std::size_t n = bytes.size();
    bytes.push_back(0);
    EXPECT_THROW(deserialize(bytes), FormatError);
    EXPECT_EQ(offset_of([&] { deserialize(bytes); }), n);
}

TEST(Container, MalformedJsonReportsOffset) {
    const std::string h = R"({"role":"x","dtype":"f64",,"shape":[0]})";
    std::vector<std::uint8_t> bytes = {'S', 'P', 'I', '1'};
    const std::uint32_t len = static_cast<std::uint32_t>(h.size());
    bytes.resize(8);
    std::memcpy(bytes.data() + 4, &len, 4);
    bytes.insert(bytes.end(), h.begin(), h.end());
    EXPECT_THROW(deserialize(bytes), JsonParseError);
    EXPECT_EQ(offset_of([&] { deserialize(bytes); }), 8 + h.find(",,") + 1);

    const std::string h2 = R"({"role":"x","dtype":"c128","shape":[0]})";
    std::vector<std::uint8_t> b2 = {'S', 'P', 'I', '1', 0, 0, 0, 0};
    const std::uint32_t len2 = static_cast<std::uint32_t>(h2.size());
    std::memcpy(b2.data() + 4, &len2, 4);
    b2.insert(b2.end(), h2.begin(), h2.end());
    EXPECT_THROW(deserialize(b2), JsonParseError);
}

TEST(Container, FileRoundTrip) {
    const auto dir = scratch_dir("file");
    const Container c = sample_container();
    write_container(dir / "sub" / "a.spi", c);
    EXPECT_EQ(read_container(dir / "sub" / "a.spi").payload, c.payload);
    EXPECT_THROW(read_file(dir / "missing.spi"), IoError);
    std::filesystem::remove_all(dir);
}

TEST(DomainContainers, RoundTrips) {
    const DetectorGeometry geom(4, 1e-3, 0.1, 6.0);
    std::vector<DiffractionImage> images(2, DiffractionImage(4));
    for (std::size_t p = 0; p < 16; ++p) {
        images[0].pixels[p] = double(p);
        images[1].pixels[p] = 0.5 * p;
    }
    const auto ic = deserialize(serialize(images_container(images, geom)));
    const auto back = images_from(ic);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].pixels, images[1].pixels);
    const auto g = geometry_from_json(ic.header.at("geometry"));
    EXPECT_EQ(g.n_side(), 4);
    EXPECT_EQ(g.pixel_size(), 1e-3);
    EXPECT_EQ(g.photon_energy(), 6.0);
    EXPECT_THROW(images_container({}, geom), ArgumentError);
    EXPECT_THROW(images_container({DiffractionImage(3)}, geom), ShapeError);

    const auto rots = sample_uniform_rotations(5, 1);
    const auto rb = rotations_from(deserialize(serialize(rotations_container(rots))));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(rb[k].matrix(), rots[k].matrix());
    EXPECT_THROW(rotations_from(ic), ArgumentError);

    const std::vector<double> gam = {0.5, 1.0, 2.0};
    EXPECT_EQ(gammas_from(deserialize(serialize(gammas_container(gam)))), gam);

    DensityVolume rho{Grid3<double>(3, 0.0), 2.5};
    for (std::size_t i = 0; i < rho.grid.data.size(); ++i) rho.grid.data[i] = double(i) - 4;
    const auto rho2 = density_from(deserialize(serialize(density_container(rho))));
    EXPECT_EQ(rho2.grid.data, rho.grid.data);
    EXPECT_EQ(rho2.voxel_size, 2.5);

    IntensityVolume I{Grid3<double>(4, 1.0), 0.01};
    const auto I2 = intensity_from(deserialize(serialize(intensity_container(I))));
    EXPECT_EQ(I2.grid.data, I.grid.data);
    EXPECT_EQ(I2.q_spacing, 0.01);
    EXPECT_THROW(intensity_from(deserialize(serialize(density_container(rho)))), ArgumentError);
}

TEST(Hashing, Fnv1aKnownVectors) {
    EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
    EXPECT_EQ(fnv1a_hex("foobar"), "85944171f73967e8");
    Json a = Json::object();
    a["x"] = 1;
    a["y"] = 2;
    EXPECT_EQ(config_hash(a), fnv1a_hex(R"({"x":1,"y":2})"));
    Json b = a;
    b["y"] = 3;
    EXPECT_NE(config_hash(a), config_hash(b));
    const auto p = provenance(a, 7);
    EXPECT_EQ(p.at("seed").get<std::uint64_t>(), 7u);
    EXPECT_EQ(p.at("config_hash").get<std::string>(), config_hash(a));
}

TEST(Plots, PgmGridLayoutAndScaling) {
    const auto dir = scratch_dir("pgm");
    std::vector<DiffractionImage> images(3, DiffractionImage(2));
    images[0].pixels = {0, 0, 0, 0};
    images[2].pixels = {0, 0, 0, std::exp(1.0) - 1};
    write_pattern_grid_pgm(dir / "g.pgm", images, 2);
    const auto bytes = read_file(dir / "g.pgm");
    const std::string head = "P5\n6 6\n65535\n";
    ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(head.size())), head);
    EXPECT_EQ(bytes.size(), head.size() + 2 * 36);
    // tile 2 sits at rows 4..5, cols 0..1; its last pixel is the maximum
    const std::size_t at = head.size() + 2 * (5 * 6 + 1);
    EXPECT_EQ(bytes[at], 0xff);
    EXPECT_EQ(bytes[at + 1], 0xff);
    const auto side_bytes = read_file(dir / "g.pgm.json");
    const auto side = Json::parse(side_bytes.begin(), side_bytes.end());
    EXPECT_EQ(side.at("tiles").get<int>(), 3);
    EXPECT_NEAR(side.at("max").get<double>(), 1.0, 1e-15);
    EXPECT_THROW(write_pattern_grid_pgm(dir / "e.pgm", {}), ArgumentError);
    std::filesystem::remove_all(dir);
}

TEST(Plots, SvgContainsSeriesAndReferences) {
    PlotOptions opt;
    opt.title = "FSC";
    opt.hline = 0.5;
    const std::string svg = svg_plot({{"a", {0, 1, 2}, {1, 0.6, 0.2}}, {"b", {0, 2}, {1, 0}}}, opt);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_NE(svg.find(">FSC<"), std::string::npos);
    EXPECT_NE(svg.find(">a<"), std::string::npos);
    EXPECT_NE(svg.find(">b<"), std::string::npos);
    EXPECT_EQ(svg, svg_plot({{"a", {0, 1, 2}, {1, 0.6, 0.2}}, {"b", {0, 2}, {1, 0}}}, opt));
    EXPECT_THROW(svg_plot({{"bad", {0, 1}, {1}}}, opt), ShapeError);
}
