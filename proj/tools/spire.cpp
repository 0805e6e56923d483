// spire: command-line front end for simulation, training, prediction and
// reconstruction of single-particle diffraction data.
//
// Exit codes: 0 success, 1 usage or invalid argument, 2 I/O, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "spire/artifacts.hpp"
#include "spire/io.hpp"
#include "spire/metrics.hpp"
#include "spire/model.hpp"
#include "spire/mtip.hpp"
#include "spire/phasing.hpp"
#include "spire/simulate.hpp"
#include "spire/train.hpp"

namespace fs = std::filesystem;
using spire::io::Json;

namespace {

constexpr const char* kIoGroup = "I/O";

struct Global {
    std::uint64_t seed = 42;
    std::string config_path;
    bool json = false;
};

/// Resolved configuration of a subcommand: every non-I/O option with its
/// effective value, in declaration order.
Json resolved_config(const CLI::App& app, const Global& g) {
    Json j = Json::object();
    j["command"] = app.get_name();
    j["seed"] = g.seed;
    for (const CLI::Option* o : app.get_options()) {
        if (o->get_group() == kIoGroup || o->get_name() == "--help" || o->get_positional()) continue;
        std::string name = o->get_single_name();
        std::string value;
        if (o->count() > 0) {
            const auto& r = o->results();
            for (std::size_t i = 0; i < r.size(); ++i) value += (i ? "," : "") + r[i];
        } else {
            value = o->get_default_str();
        }
        j[name] = value;
    }
    return j;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stod(tok));
    return out;
}

fs::path dataset_file(const fs::path& dir, const std::string& name) { return dir / (name + ".spi"); }

std::vector<std::uint8_t> mask_from_header(const Json& h, int n_side) {
    if (!h.contains("artifacts")) return {};
    const auto a = spire::ArtifactSet::parse(h.at("artifacts").get<std::string>());
    if (!a.beamstop) return {};
    return spire::build_beamstop_mask(n_side).bits;
}

void print_summary(const Json& s, const Global& g) {
    if (g.json) {
        std::cout << s.dump(2) << "\n";
        return;
    }
    for (auto it = s.begin(); it != s.end(); ++it) {
        if (it.value().is_structured()) continue;
        std::cout << it.key() << ": " << (it.value().is_string() ? it.value().get<std::string>() : it.value().dump())
                  << "\n";
    }
}

Json model_config_json(const spire::ModelConfig& c) {
    Json j = Json::object();
    j["image_side"] = c.image_side;
    j["stage_widths"] = c.stage_widths;
    j["blocks_per_stage"] = c.blocks_per_stage;
    j["stem_kernel"] = c.stem_kernel;
    j["siren_width"] = c.siren_width;
    j["siren_layers"] = c.siren_layers;
    j["omega0"] = c.omega0;
    j["omega"] = c.omega;
    j["q_scale"] = c.q_scale;
    return j;
}

spire::ModelConfig model_config_from_json(const Json& j) {
    spire::ModelConfig c;
    c.image_side = j.at("image_side").get<int>();
    c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    c.stem_kernel = j.at("stem_kernel").get<int>();
    c.siren_width = j.at("siren_width").get<int>();
    c.siren_layers = j.at("siren_layers").get<int>();
    c.omega0 = j.at("omega0").get<double>();
    c.omega = j.at("omega").get<double>();
    c.q_scale = j.at("q_scale").get<double>();
    return c;
}

struct Dataset {
    std::vector<spire::DiffractionImage> images;
    spire::DetectorGeometry geometry = spire::DetectorGeometry::reference_instrument();
    Json header;
    std::vector<std::uint8_t> mask;
};

Dataset load_dataset(const fs::path& dir) {
    const auto c = spire::io::read_container(dataset_file(dir, "images"));
    Dataset d;
    d.images = spire::io::images_from(c);
    d.geometry = spire::io::geometry_from_json(c.header.at("geometry"));
    d.header = c.header;
    d.mask = mask_from_header(c.header, d.geometry.n_side());
    return d;
}

template <class T>
spire::TrainingSet<T> training_set(const Dataset& d, double input_scale) {
    return spire::make_training_set<T>(d.images, input_scale, d.mask);
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string out, pdb;
    int n = 32;
    double voxel = 3.5;
    int oversample = 2;
    double blur = 1.0;
    spire::BlobPhantomSpec phantom;
    int detector_side = 128;
    double detector_span = 0.1;
    double distance = 0.2;
    double energy = 4.6;
    std::size_t images = 1000;
    double photons = 1e4;
};

void add_simulate(CLI::App& app, SimulateArgs& a) {
    app.add_option("--out", a.out, "Output dataset directory")->required()->group(kIoGroup);
    app.add_option("--pdb", a.pdb, "PDB file (default: synthetic blob phantom)")->group(kIoGroup);
    app.add_option("--n", a.n, "Density grid side")->capture_default_str();
    app.add_option("--voxel", a.voxel, "Voxel size (angstrom)")->capture_default_str();
    app.add_option("--oversample", a.oversample, "Intensity oversampling factor")->capture_default_str();
    app.add_option("--blur", a.blur, "Atomic Gaussian width for PDB input (angstrom)")->capture_default_str();
    app.add_option("--blobs", a.phantom.n_blobs, "Phantom blob count")->capture_default_str();
    app.add_option("--blob-sigma-min", a.phantom.sigma_min, "Smallest blob width (voxels)")->capture_default_str();
    app.add_option("--blob-sigma-max", a.phantom.sigma_max, "Largest blob width (voxels)")->capture_default_str();
    app.add_option("--phantom-seed", a.phantom.seed, "Phantom layout seed")->capture_default_str();
    app.add_option("--detector-side", a.detector_side, "Detector pixels per side")->capture_default_str();
    app.add_option("--detector-span", a.detector_span, "Detector width (m)")->capture_default_str();
    app.add_option("--distance", a.distance, "Sample-detector distance (m)")->capture_default_str();
    app.add_option("--energy", a.energy, "Photon energy (keV)")->capture_default_str();
    app.add_option("--images", a.images, "Number of patterns")->capture_default_str();
    app.add_option("--photons", a.photons, "Mean photons per pattern (0: unit flux)")->capture_default_str();
}

Json run_simulate(const SimulateArgs& a, const Json& config, const Global& g) {
    spire::DensityVolume rho;
    if (!a.pdb.empty()) {
        std::ifstream in(a.pdb);
        if (!in) throw spire::IoError("cannot open '" + a.pdb + "'");
        rho = spire::atoms_to_density(spire::parse_pdb_atoms(in), a.n, a.voxel, a.blur);
    } else {
        spire::BlobPhantomSpec ps = a.phantom;
        ps.n = a.n;
        ps.voxel_size = a.voxel;
        rho = spire::make_blob_phantom(ps);
    }
    const spire::DetectorGeometry geom(a.detector_side, a.detector_span / a.detector_side, a.distance, a.energy);
    const spire::IntensityVolume intensity = spire::density_to_intensity(rho, a.oversample);
    const spire::QGrid qgrid = spire::build_qgrid(geom);
    const double flux = a.photons > 0 ? spire::calibrate_flux(intensity, qgrid, a.photons, g.seed) : 1.0;
    const auto ds = spire::simulate_dataset(intensity, geom, a.images, flux, g.seed);

    const Json prov = spire::io::provenance(config, g.seed);
    Json ih = prov;
    ih["flux_scale"] = flux;
    const fs::path out(a.out);
    spire::io::write_container(dataset_file(out, "density"), spire::io::density_container(rho, prov));
    spire::io::write_container(dataset_file(out, "intensity"), spire::io::intensity_container(intensity, prov));
    spire::io::write_container(dataset_file(out, "images"), spire::io::images_container(ds.images, geom, ih));
    spire::io::write_container(dataset_file(out, "rotations"), spire::io::rotations_container(ds.rotations, prov));

    double mean = 0;
    std::size_t clipped = 0;
    for (const auto& im : ds.images) {
        mean += im.total();
        clipped += im.out_of_range;
    }
    Json s = Json::object();
    s["images"] = ds.images.size();
    s["flux_scale"] = flux;
    s["mean_photons"] = mean / static_cast<double>(ds.images.size());
    s["out_of_range_pixels"] = clipped;
    s["q_max"] = qgrid.max_norm();
    s["config_hash"] = prov["config_hash"];
    return s;
}

// ---------------------------------------------------------------------------
// corrupt
// ---------------------------------------------------------------------------

struct CorruptArgs {
    std::string in, out, fluence_samples;
    std::string artifacts = "FP";
    double gaussian_sigma = 0.05;
    double fluence_median = 1.0, fluence_sigma = 0.45, gamma_min = 0.3, gamma_max = 2.6;
};

void add_corrupt(CLI::App& app, CorruptArgs& a) {
    app.add_option("--in", a.in, "Input dataset directory")->required()->group(kIoGroup);
    app.add_option("--out", a.out, "Output dataset directory")->required()->group(kIoGroup);
    app.add_option("--fluence-samples", a.fluence_samples, "Empirical fluence samples (text, one per line)")
        ->group(kIoGroup);
    app.add_option("--artifacts", a.artifacts, "Artifact letters: F fluence, P Poisson, G Gaussian, B beam stop")
        ->capture_default_str();
    app.add_option("--gaussian-sigma", a.gaussian_sigma, "Gaussian noise width (photons)")->capture_default_str();
    app.add_option("--fluence-median", a.fluence_median, "Log-normal fluence median")->capture_default_str();
    app.add_option("--fluence-sigma", a.fluence_sigma, "Log-normal fluence log-width")->capture_default_str();
    app.add_option("--gamma-min", a.gamma_min, "Lower fluence clip")->capture_default_str();
    app.add_option("--gamma-max", a.gamma_max, "Upper fluence clip")->capture_default_str();
}

Json run_corrupt(const CorruptArgs& a, const Json& config, const Global& g) {
    const Dataset d = load_dataset(a.in);
    if (d.header.contains("artifacts") && !d.header.at("artifacts").get<std::string>().empty())
        throw spire::ArgumentError("corrupt: dataset is already corrupted");
    spire::ArtifactConfig ac;
    ac.enabled = spire::ArtifactSet::parse(a.artifacts);
    ac.gaussian_sigma = a.gaussian_sigma;
    ac.fluence = a.fluence_samples.empty()
                     ? spire::FluenceModel::lognormal(a.fluence_median, a.fluence_sigma, a.gamma_min, a.gamma_max)
                     : spire::FluenceModel::empirical(spire::read_fluence_samples(a.fluence_samples));
    ac.seed = g.seed;
    const auto res = spire::corrupt_dataset(d.images, ac);
    std::vector<spire::DiffractionImage> images;
    std::vector<double> gammas;
    for (const auto& r : res) {
        images.push_back(r.image);
        gammas.push_back(r.gamma);
    }

    const Json prov = spire::io::provenance(config, g.seed);
    Json ih = prov;
    ih["artifacts"] = ac.enabled.str();
    if (d.header.contains("flux_scale")) ih["flux_scale"] = d.header["flux_scale"];
    const fs::path in(a.in), out(a.out);
    fs::create_directories(out);
    spire::io::write_container(dataset_file(out, "images"), spire::io::images_container(images, d.geometry, ih));
    spire::io::write_container(dataset_file(out, "gammas"), spire::io::gammas_container(gammas, prov));
    for (const char* name : {"rotations", "density", "intensity"}) {
        const fs::path src = dataset_file(in, name);
        if (fs::exists(src) && fs::absolute(src) != fs::absolute(dataset_file(out, name)))
            fs::copy_file(src, dataset_file(out, name), fs::copy_options::overwrite_existing);
    }
    Json s = Json::object();
    s["images"] = images.size();
    s["artifacts"] = ac.enabled.str();
    double gmin = 1e300, gmax = -1e300;
    for (double v : gammas) gmin = std::min(gmin, v), gmax = std::max(gmax, v);
    s["gamma_min"] = gmin;
    s["gamma_max"] = gmax;
    s["config_hash"] = prov["config_hash"];
    return s;
}

// ---------------------------------------------------------------------------
// train / predict
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, out;
    spire::TrainConfig train;
    bool literal_schedule = false;
    std::string widths = "16,32,64";
    spire::ModelConfig model;
    std::string precision = "float";
};

void add_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--data", a.data, "Dataset directory")->required()->group(kIoGroup);
    app.add_option("--out", a.out, "Output model directory")->required()->group(kIoGroup);
    auto& t = a.train;
    app.add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
    app.add_option("--batch", t.batch_size, "Batch size")->capture_default_str();
    app.add_option("--lr-max", t.alpha_max, "Peak learning rate")->capture_default_str();
    app.add_option("--lr-min", t.alpha_min, "Final learning rate")->capture_default_str();
    app.add_option("--warmup", t.x_warmup, "Warm-up epochs")->capture_default_str();
    app.add_option("--horizon", t.x_max, "Schedule length (epochs)")->capture_default_str();
    app.add_option("--weight-decay", t.weight_decay, "Decoupled weight decay")->capture_default_str();
    app.add_option("--validation", t.validation_fraction, "Validation fraction")->capture_default_str();
    app.add_option("--input-scale", t.input_scale, "Photon premultiplier before ln(1+x)")->capture_default_str();
    app.add_option("--pixel-fraction", t.pixel_fraction, "Random pixel fraction per step")->capture_default_str();
    app.add_flag("--literal-schedule", a.literal_schedule, "Cosine argument without the pi factor");
    app.add_option("--widths", a.widths, "Residual stage widths")->capture_default_str();
    app.add_option("--blocks", a.model.blocks_per_stage, "Residual blocks per stage")->capture_default_str();
    app.add_option("--stem", a.model.stem_kernel, "Stem kernel size")->capture_default_str();
    app.add_option("--siren-width", a.model.siren_width, "Decoder width")->capture_default_str();
    app.add_option("--siren-layers", a.model.siren_layers, "Decoder hidden layers")->capture_default_str();
    app.add_option("--omega0", a.model.omega0, "First-layer frequency")->capture_default_str();
    app.add_option("--omega", a.model.omega, "Hidden-layer frequency")->capture_default_str();
    app.add_option("--q-scale", a.model.q_scale, "Decoder input scale (0: 1/q_max)")->default_val(0.0);
    app.add_option("--precision", a.precision, "float or double")
        ->check(CLI::IsMember({"float", "double"}))
        ->capture_default_str();
}

template <class T>
Json train_impl(const TrainArgs& a, const Json& config, const Global& g) {
    const Dataset d = load_dataset(a.data);
    const spire::QGrid qgrid = spire::build_qgrid(d.geometry);
    spire::ModelConfig mc = a.model;
    mc.image_side = d.geometry.n_side();
    mc.stage_widths.clear();
    for (double w : parse_list(a.widths)) mc.stage_widths.push_back(static_cast<int>(w));
    if (!(mc.q_scale > 0)) mc.q_scale = 1.0 / qgrid.max_norm();
    spire::TrainConfig tc = a.train;
    tc.seed = g.seed;
    tc.pi_corrected = !a.literal_schedule;
    const spire::Model model(mc);
    const auto data = training_set<T>(d, tc.input_scale);
    auto params = model.init_params<T>(g.seed);
    const auto fr = spire::fit<T>(model, std::move(params), data, qgrid, tc, [&](const spire::HistoryRow& r) {
        if (!g.json) std::cerr << "epoch " << r.epoch << " lr " << r.lr << " train " << r.train_loss << " val "
                               << r.val_loss << "\n";
    });
    if (fr.diverged) throw spire::NumericalError("training diverged: " + fr.message);

    const fs::path out(a.out);
    Json h = spire::io::provenance(config, g.seed);
    h["model"] = model_config_json(mc);
    h["input_scale"] = tc.input_scale;
    h["best_epoch"] = fr.best_epoch;
    h["best_val_loss"] = fr.best_val_loss;
    spire::io::write_container(out / "params.spi",
                               spire::io::make_container<T>("params", {fr.best_params.size()}, fr.best_params, h));
    std::ostringstream csv;
    spire::write_history_csv(csv, fr.history);
    spire::io::write_text(out / "history.csv", csv.str());

    Json s = Json::object();
    s["parameters"] = model.parameter_count();
    s["epochs"] = fr.history.size();
    s["initial_val_loss"] = fr.initial_val_loss;
    s["best_epoch"] = fr.best_epoch;
    s["best_val_loss"] = fr.best_val_loss;
    s["config_hash"] = h["config_hash"];
    return s;
}

struct PredictArgs {
    std::string data, model, out;
    int volume_grid = 0;
};

void add_predict(CLI::App& app, PredictArgs& a) {
    app.add_option("--data", a.data, "Dataset directory")->required()->group(kIoGroup);
    app.add_option("--model", a.model, "Trained parameters (params.spi)")->required()->group(kIoGroup);
    app.add_option("--out", a.out, "Output prediction directory")->required()->group(kIoGroup);
    app.add_option("--volume-grid", a.volume_grid, "Also write the decoder intensity on this grid side")
        ->capture_default_str();
}

template <class T>
Json predict_impl(const PredictArgs& a, const spire::io::Container& pc, const Json& config, const Global& g) {
    const Dataset d = load_dataset(a.data);
    const spire::QGrid qgrid = spire::build_qgrid(d.geometry);
    const spire::Model model(model_config_from_json(pc.header.at("model")));
    if (model.config().image_side != d.geometry.n_side())
        throw spire::ShapeError("predict: model expects " + std::to_string(model.config().image_side) +
                                "-pixel images");
    const std::vector<T> params = pc.values<T>();
    const auto data = training_set<T>(d, pc.header.at("input_scale").get<double>());
    const auto pred = spire::predict_dataset<T>(model, params, data, qgrid, false);

    const fs::path out(a.out), in(a.data);
    const Json prov = spire::io::provenance(config, g.seed);
    spire::io::write_container(out / "rotations.spi", spire::io::rotations_container(pred.rotations, prov));
    spire::io::write_container(out / "gammas.spi", spire::io::gammas_container(pred.gammas, prov));

    Json s = Json::object();
    s["images"] = pred.rotations.size();
    if (fs::exists(dataset_file(in, "rotations"))) {
        const auto truth = spire::io::rotations_from(spire::io::read_container(dataset_file(in, "rotations")));
        const auto al = spire::align_rotation_sets(pred.rotations, truth);
        s["median_orientation_error_deg"] = spire::median(al.errors) * 180.0 / std::numbers::pi;
    }
    if (fs::exists(dataset_file(in, "gammas"))) {
        const auto truth = spire::io::gammas_from(spire::io::read_container(dataset_file(in, "gammas")));
        const auto fit = spire::fit_through_origin(truth, pred.gammas);
        s["gamma_slope"] = fit.slope;
        s["gamma_r2"] = fit.r2;
        s["gamma_r2_centered"] = fit.r2_centered;
    }
    if (a.volume_grid > 0) {
        const double qs = qgrid.max_norm() / (a.volume_grid / 2 - 1);
        spire::io::write_container(out / "intensity.spi",
                                   spire::io::intensity_container(
                                       model.decoder_volume<T>(params, a.volume_grid, qs), prov));
    }
    s["config_hash"] = prov["config_hash"];
    return s;
}

// ---------------------------------------------------------------------------
// phase / mtip
// ---------------------------------------------------------------------------

void add_phasing_options(CLI::App& app, spire::PhasingConfig& p, const std::string& prefix = "") {
    app.add_option("--" + prefix + "beta", p.hio_beta, "HIO feedback")->capture_default_str();
    app.add_option("--" + prefix + "blocks", p.n_blocks, "HIO+ER blocks")->capture_default_str();
    app.add_option("--" + prefix + "hio", p.hio_per_block, "HIO steps per block")->capture_default_str();
    app.add_option("--" + prefix + "er", p.er_per_block, "ER steps per block")->capture_default_str();
    app.add_option("--" + prefix + "shrinkwrap-every", p.shrinkwrap_every, "Shrinkwrap period")
        ->capture_default_str();
    app.add_option("--" + prefix + "shrinkwrap-sigma", p.shrinkwrap_sigma, "Initial blur (voxels)")
        ->capture_default_str();
    app.add_option("--" + prefix + "shrinkwrap-decay", p.shrinkwrap_decay, "Blur decay per update")
        ->capture_default_str();
    app.add_option("--" + prefix + "threshold", p.shrinkwrap_threshold, "Support threshold (fraction of max)")
        ->capture_default_str();
    app.add_option("--" + prefix + "radius", p.support_radius_fraction, "Initial ball radius / side")
        ->capture_default_str();
    app.add_option("--" + prefix + "restarts", p.n_restarts, "Random restarts")->capture_default_str();
}

struct PhaseArgs {
    std::string intensity, out, truth, history;
    spire::PhasingConfig phasing;
    bool no_positivity = false;
};

void add_phase(CLI::App& app, PhaseArgs& a) {
    app.add_option("--intensity", a.intensity, "Intensity volume (.spi)")->required()->group(kIoGroup);
    app.add_option("--out", a.out, "Output density (.spi)")->required()->group(kIoGroup);
    app.add_option("--truth", a.truth, "Reference density for a resolution estimate")->group(kIoGroup);
    app.add_option("--history", a.history, "Residual history CSV")->group(kIoGroup);
    add_phasing_options(app, a.phasing);
    app.add_flag("--no-positivity", a.no_positivity, "Drop the positivity constraint");
}

std::optional<spire::Resolution> resolution_against(const std::string& truth_path, const spire::DensityVolume& rho,
                                                    Json& s) {
    if (truth_path.empty()) return std::nullopt;
    spire::DensityVolume truth = spire::io::density_from(spire::io::read_container(truth_path));
    if (truth.n() < rho.n()) truth = spire::pad_density(truth, rho.n());
    if (truth.n() != rho.n() || std::abs(truth.voxel_size - rho.voxel_size) > 1e-9 * rho.voxel_size)
        throw spire::ArgumentError("reference density grid does not match the reconstruction");
    const auto al = spire::align_density(truth, rho);
    const auto r = spire::resolution_at(spire::fsc_density(truth, al.aligned), 0.5);
    s["resolution_fsc05_A"] = spire::format_resolution(r);
    s["alignment_correlation"] = al.correlation;
    return r;
}

Json run_phase(const PhaseArgs& a, const Json& config, const Global& g) {
    const auto I = spire::io::intensity_from(spire::io::read_container(a.intensity));
    spire::PhasingConfig pc = a.phasing;
    pc.positivity = !a.no_positivity;
    pc.seed = g.seed;
    const auto res = spire::retrieve_phase(I, pc, nullptr, nullptr, nullptr, !a.history.empty());
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    const Json prov = spire::io::provenance(config, g.seed);
    spire::io::write_container(a.out, spire::io::density_container(res.density, prov));
    if (!a.history.empty()) {
        std::ostringstream os;
        os << "iteration,residual\n";
        os.precision(10);
        for (std::size_t i = 0; i < res.residual_history.size(); ++i) os << i << ',' << res.residual_history[i] << '\n';
        spire::io::write_text(a.history, os.str());
    }
    Json s = Json::object();
    s["residual"] = res.residual;
    s["best_restart"] = res.best_restart;
    s["voxel_size"] = res.density.voxel_size;
    resolution_against(a.truth, res.density, s);
    s["config_hash"] = prov["config_hash"];
    return s;
}

struct MtipArgs {
    std::string data, prediction, truth, out;
    std::string mode = "pure";
    std::string matching = "auto";
    spire::MtipConfig cfg;
};

void add_mtip(CLI::App& app, MtipArgs& a) {
    app.add_option("--data", a.data, "Dataset directory")->required()->group(kIoGroup);
    app.add_option("--prediction", a.prediction, "Prediction directory (ml-assisted mode)")->group(kIoGroup);
    app.add_option("--truth", a.truth, "Reference density for the resolution trace")->group(kIoGroup);
    app.add_option("--out", a.out, "Output directory")->required()->group(kIoGroup);
    app.add_option("--mode", a.mode, "pure or ml-assisted")
        ->check(CLI::IsMember({"pure", "ml-assisted"}))
        ->capture_default_str();
    app.add_option("--matching", a.matching, "Distance domain: auto, raw or log")
        ->check(CLI::IsMember({"auto", "raw", "log"}))
        ->capture_default_str();
    auto& c = a.cfg;
    app.add_option("--iterations", c.outer_iterations, "Outer iterations")->capture_default_str();
    app.add_option("--n-reference", c.n_reference, "Reference orientations")->capture_default_str();
    app.add_option("--grid", c.grid_side, "Intensity grid side")->capture_default_str();
    app.add_option("--q-spacing", c.q_spacing, "Grid spacing (0: match --truth, else fit the detector)")->capture_default_str();
    app.add_option("--lambda", c.lambda_reg, "Merge regularization")->capture_default_str();
    app.add_option("--cg-tol", c.cg_tolerance, "CG relative tolerance")->capture_default_str();
    app.add_option("--cg-iters", c.cg_max_iterations, "CG iteration cap")->capture_default_str();
    app.add_flag("--align-rotation", c.align_rotation, "Search rotations when scoring against --truth");
    add_phasing_options(app, c.initial_phasing, "initial-");
    add_phasing_options(app, c.phasing);
}

Json run_mtip(const MtipArgs& a, const Json& config, const Global& g) {
    const Dataset d = load_dataset(a.data);
    const spire::QGrid qgrid = spire::build_qgrid(d.geometry);
    spire::MtipConfig cfg = a.cfg;
    cfg.seed = g.seed;
    cfg.mode = spire::parse_mtip_mode(a.mode);
    const std::string arts = d.header.contains("artifacts") ? d.header.at("artifacts").get<std::string>() : "";
    const auto as = spire::ArtifactSet::parse(arts);
    cfg.log_matching = a.matching == "log" || (a.matching == "auto" && (as.poisson || as.gaussian));

    spire::MtipInputs in;
    in.pixel_mask = d.mask;
    std::vector<spire::DiffractionImage> images = d.images;
    if (cfg.mode == spire::MtipMode::ml_assisted) {
        if (a.prediction.empty()) throw spire::ArgumentError("mtip: ml-assisted mode needs --prediction");
        const fs::path p(a.prediction);
        const auto rots = spire::io::rotations_from(spire::io::read_container(p / "rotations.spi"));
        const auto gam = spire::io::gammas_from(spire::io::read_container(p / "gammas.spi"));
        if (rots.size() != images.size()) throw spire::ShapeError("mtip: prediction does not match the dataset");
        auto pri = spire::inject_ml_priors(cfg, rots, gam, images);
        images = std::move(pri.images);
        in.references = std::move(pri.references);
        in.initial_rotations = rots;
    }
    std::optional<spire::DensityVolume> truth;
    if (!a.truth.empty()) {
        truth = spire::io::density_from(spire::io::read_container(a.truth));
        if (!(cfg.q_spacing > 0)) cfg.q_spacing = 1.0 / (cfg.grid_side * truth->voxel_size);
    }
    const double qs = cfg.resolved_q_spacing(qgrid);
    cfg.q_spacing = qs;
    if (truth) {
        spire::DensityVolume t = *truth;
        if (t.n() < cfg.grid_side) t = spire::pad_density(t, cfg.grid_side);
        const double voxel = 1.0 / (cfg.grid_side * qs);
        if (t.n() != cfg.grid_side || std::abs(t.voxel_size - voxel) > 1e-6 * voxel)
            throw spire::ArgumentError("mtip: --truth voxel size " + std::to_string(t.voxel_size) +
                                       " does not match the reconstruction voxel " + std::to_string(voxel));
        in.truth = std::move(t);
    }
    const auto res = spire::mtip_iterate(images, cfg, qgrid, in);

    const fs::path out(a.out);
    const Json prov = spire::io::provenance(config, g.seed);
    spire::io::write_container(out / "density.spi", spire::io::density_container(res.density, prov));
    spire::io::write_container(out / "intensity.spi", spire::io::intensity_container(res.intensity, prov));
    spire::io::write_container(out / "rotations.spi", spire::io::rotations_container(res.rotations, prov));
    std::ostringstream csv;
    spire::write_mtip_trace_csv(csv, res.trace);
    spire::io::write_text(out / "trace.csv", csv.str());

    Json s = Json::object();
    s["mode"] = spire::to_string(cfg.mode);
    s["iterations"] = res.trace.size();
    s["q_spacing"] = qs;
    s["voxel_size"] = res.density.voxel_size;
    s["failed"] = !res.trace.empty() && res.trace.back().failed;
    if (!res.trace.empty()) {
        s["final_phasing_residual"] = res.trace.back().phasing_residual;
        if (res.trace.back().evaluated) s["resolution_fsc05_A"] = spire::format_resolution(res.trace.back().resolution);
    }
    s["config_hash"] = prov["config_hash"];
    return s;
}

// ---------------------------------------------------------------------------
// fsc / plot
// ---------------------------------------------------------------------------

spire::FscCurve fsc_of(const spire::io::Container& a, const spire::io::Container& b, bool align) {
    if (a.role() != b.role()) throw spire::ArgumentError("fsc: containers hold different kinds of volume");
    if (a.role() == "density") {
        auto ra = spire::io::density_from(a);
        auto rb = spire::io::density_from(b);
        // a smaller box (e.g. the unpadded truth) is zero-padded to the larger one
        if (ra.voxel_size == rb.voxel_size && ra.n() != rb.n()) {
            if (ra.n() < rb.n()) ra = spire::pad_density(ra, rb.n());
            else rb = spire::pad_density(rb, ra.n());
        }
        if (align) rb = spire::align_density(ra, rb).aligned;
        return spire::fsc_density(ra, rb);
    }
    if (a.role() == "intensity") return spire::fsc_intensity(spire::io::intensity_from(a), spire::io::intensity_from(b));
    throw spire::ArgumentError("fsc: expected density or intensity containers");
}

struct FscArgs {
    std::string a, b, csv;
    double threshold = 0.5;
    bool align = false;
};

void add_fsc(CLI::App& app, FscArgs& a) {
    app.add_option("a", a.a, "First volume")->required()->group(kIoGroup);
    app.add_option("b", a.b, "Second volume")->required()->group(kIoGroup);
    app.add_option("--csv", a.csv, "Write the curve as CSV")->group(kIoGroup);
    app.add_option("--threshold", a.threshold, "FSC threshold")->capture_default_str();
    app.add_flag("--align", a.align, "Align the second density to the first (shift, inversion)");
}

Json run_fsc(const FscArgs& a, const Json&, const Global&) {
    const auto curve = fsc_of(spire::io::read_container(a.a), spire::io::read_container(a.b), a.align);
    const auto r = spire::resolution_at(curve, a.threshold);
    if (!a.csv.empty()) {
        std::ostringstream os;
        spire::write_fsc_csv(os, curve);
        spire::io::write_text(a.csv, os.str());
    }
    Json s = Json::object();
    s["threshold"] = a.threshold;
    s["resolution_A"] = spire::format_resolution(r);
    s["crossed"] = r.crossed;
    s["shells"] = curve.q.size();
    return s;
}

struct PlotArgs {
    std::string input, second, out;
    int count = 16, cols = 4;
    double threshold = 0.5;
    bool linear = false;
};

Json run_plot_patterns(const PlotArgs& a) {
    auto images = spire::io::images_from(spire::io::read_container(a.input));
    if (a.count > 0 && images.size() > static_cast<std::size_t>(a.count)) images.resize(static_cast<std::size_t>(a.count));
    spire::io::write_pattern_grid_pgm(a.out, images, a.cols, !a.linear);
    Json s = Json::object();
    s["tiles"] = images.size();
    s["output"] = a.out;
    return s;
}

Json run_plot_fsc(const PlotArgs& a) {
    const auto curve = fsc_of(spire::io::read_container(a.input), spire::io::read_container(a.second), false);
    spire::io::Series sr{"FSC", curve.q, curve.fsc};
    spire::io::PlotOptions po;
    po.title = "Fourier shell correlation";
    po.xlabel = "q (1/A)";
    po.ylabel = "FSC";
    po.hline = a.threshold;
    spire::io::write_text(a.out, spire::io::svg_plot({sr}, po));
    Json s = Json::object();
    s["resolution_A"] = spire::format_resolution(spire::resolution_at(curve, a.threshold));
    s["output"] = a.out;
    return s;
}

Json run_plot_gamma(const PlotArgs& a) {
    const auto pred = spire::io::gammas_from(spire::io::read_container(a.input));
    const auto truth = spire::io::gammas_from(spire::io::read_container(a.second));
    if (pred.size() != truth.size()) throw spire::ShapeError("plot gamma: lengths differ");
    const auto fit = spire::fit_through_origin(truth, pred);
    spire::io::PlotOptions po;
    po.title = "Scaling factors";
    po.xlabel = "true gamma";
    po.ylabel = "predicted gamma";
    po.lines = false;
    po.diagonal = true;
    spire::io::write_text(a.out, spire::io::svg_plot({{"", truth, pred}}, po));
    Json s = Json::object();
    s["slope"] = fit.slope;
    s["r2"] = fit.r2;
    s["output"] = a.out;
    return s;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const spire::IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return 2;
    if (dynamic_cast<const spire::NumericalError*>(&e)) return 3;
    return 1;
}

/// Turns `--config` JSON into trailing arguments, so its values take
/// precedence over flags given on the command line.
std::vector<std::string> config_arguments(const std::string& path, const std::string& sub) {
    std::ifstream in(path);
    if (!in) throw spire::IoError("cannot open config '" + path + "'");
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw spire::IoError("config '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw spire::ArgumentError("config must be a JSON object");
    std::vector<std::string> out;
    const auto add = [&](const std::string& key, const Json& v) {
        if (v.is_boolean()) {
            out.push_back("--" + key + "=" + (v.get<bool>() ? "true" : "false"));
        } else if (v.is_array()) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + (v[i].is_string() ? v[i].get<std::string>() : v[i].dump());
            out.push_back("--" + key + "=" + s);
        } else {
            out.push_back("--" + key + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
        }
    };
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.value().is_object()) {
            if (it.key() != sub) continue;
            for (auto jt = it.value().begin(); jt != it.value().end(); ++jt) add(jt.key(), jt.value());
        } else {
            add(it.key(), it.value());
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spire: single-particle imaging simulation, learning and reconstruction"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.fallthrough();
    Global g;
    app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
    app.add_option("--config", g.config_path, "JSON file overriding flags");
    app.add_flag("--json", g.json, "Print a JSON summary on stdout");

    SimulateArgs sim;
    CorruptArgs cor;
    TrainArgs trn;
    PredictArgs prd;
    MtipArgs mtp;
    PhaseArgs phs;
    FscArgs fsc;
    PlotArgs plt;
    auto* c_sim = app.add_subcommand("simulate", "Simulate diffraction patterns from a phantom or PDB file");
    add_simulate(*c_sim, sim);
    auto* c_cor = app.add_subcommand("corrupt", "Apply experimental artifacts to a dataset");
    add_corrupt(*c_cor, cor);
    auto* c_trn = app.add_subcommand("train", "Train the pose/fluence encoders and intensity decoder");
    add_train(*c_trn, trn);
    auto* c_prd = app.add_subcommand("predict", "Predict orientations and scaling factors");
    add_predict(*c_prd, prd);
    auto* c_mtp = app.add_subcommand("mtip", "Multi-tiered iterative phasing");
    add_mtip(*c_mtp, mtp);
    auto* c_phs = app.add_subcommand("phase", "Phase retrieval of an intensity volume");
    add_phase(*c_phs, phs);
    auto* c_fsc = app.add_subcommand("fsc", "Fourier shell correlation of two volumes");
    add_fsc(*c_fsc, fsc);
    auto* c_plt = app.add_subcommand("plot", "Pattern grids (PGM) and curves (SVG)");
    c_plt->require_subcommand(1);
    auto* p_pat = c_plt->add_subcommand("patterns", "Tile diffraction patterns into a 16-bit PGM");
    p_pat->add_option("images", plt.input, "Images container")->required()->group(kIoGroup);
    p_pat->add_option("-o,--out", plt.out, "Output .pgm")->required()->group(kIoGroup);
    p_pat->add_option("--count", plt.count, "Patterns to show")->capture_default_str();
    p_pat->add_option("--cols", plt.cols, "Tiles per row")->capture_default_str();
    p_pat->add_flag("--linear", plt.linear, "Linear instead of ln(1+x) scaling");
    auto* p_fsc = c_plt->add_subcommand("fsc", "FSC curve of two volumes as SVG");
    p_fsc->add_option("a", plt.input, "First volume")->required()->group(kIoGroup);
    p_fsc->add_option("b", plt.second, "Second volume")->required()->group(kIoGroup);
    p_fsc->add_option("-o,--out", plt.out, "Output .svg")->required()->group(kIoGroup);
    p_fsc->add_option("--threshold", plt.threshold, "Threshold line")->capture_default_str();
    auto* p_gam = c_plt->add_subcommand("gamma", "Predicted vs true scaling factors as SVG");
    p_gam->add_option("predicted", plt.input, "Predicted gammas")->required()->group(kIoGroup);
    p_gam->add_option("truth", plt.second, "True gammas")->required()->group(kIoGroup);
    p_gam->add_option("-o,--out", plt.out, "Output .svg")->required()->group(kIoGroup);

    std::vector<std::string> args;
    for (int i = argc - 1; i >= 1; --i) args.emplace_back(argv[i]);
    try {
        // Locate --config and the subcommand before the real parse.
        std::string cfg_path, sub;
        for (int i = 1; i < argc; ++i) {
            const std::string s = argv[i];
            if (s == "--config" && i + 1 < argc) cfg_path = argv[++i];
            else if (s.rfind("--config=", 0) == 0) cfg_path = s.substr(9);
            else if (sub.empty() && !s.empty() && s[0] != '-')
                for (const CLI::App* c : app.get_subcommands([](CLI::App*) { return true; }))
                    if (c->get_name() == s) sub = s;
        }
        if (!cfg_path.empty()) {
            auto extra = config_arguments(cfg_path, sub);
            for (auto& e : extra) args.insert(args.begin(), e);
        }
    } catch (const spire::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }

    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const auto run = [&](CLI::App* cmd, auto&& fn) {
            const Json config = resolved_config(*cmd, g);
            print_summary(fn(config), g);
        };
        if (*c_sim) run(c_sim, [&](const Json& c) { return run_simulate(sim, c, g); });
        else if (*c_cor) run(c_cor, [&](const Json& c) { return run_corrupt(cor, c, g); });
        else if (*c_trn)
            run(c_trn, [&](const Json& c) {
                return trn.precision == "double" ? train_impl<double>(trn, c, g) : train_impl<float>(trn, c, g);
            });
        else if (*c_prd)
            run(c_prd, [&](const Json& c) {
                const auto pc = spire::io::read_container(prd.model);
                pc.expect_role("params");
                return pc.dtype() == spire::io::DType::f64 ? predict_impl<double>(prd, pc, c, g)
                                                           : predict_impl<float>(prd, pc, c, g);
            });
        else if (*c_mtp) run(c_mtp, [&](const Json& c) { return run_mtip(mtp, c, g); });
        else if (*c_phs) run(c_phs, [&](const Json& c) { return run_phase(phs, c, g); });
        else if (*c_fsc) run(c_fsc, [&](const Json& c) { return run_fsc(fsc, c, g); });
        else if (*p_pat) print_summary(run_plot_patterns(plt), g);
        else if (*p_fsc) print_summary(run_plot_fsc(plt), g);
        else if (*p_gam) print_summary(run_plot_gamma(plt), g);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 0;
}
