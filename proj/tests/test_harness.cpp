#include <gtest/gtest.h>

#include <bit>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "dpa/harness/config.hpp"
#include "dpa/harness/io.hpp"
#include "dpa/harness/pipeline.hpp"
#include "dpa/harness/report.hpp"
#include "support/idx_writer.hpp"
#include "support/test_functions.hpp"

using namespace dpa;
using namespace dpa::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dpa_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void flip_byte(std::string& s, std::size_t at) { s[at] = static_cast<char>(s[at] ^ 0x01); }

/// Rewrites the trailing checksum so only the structural checks remain.
void reseal(std::string& s) {
    const std::uint64_t h = fnv1a64(std::string_view(s).substr(0, s.size() - 8));
    for (int i = 0; i < 8; ++i) s[s.size() - 8 + i] = static_cast<char>((h >> (8 * i)) & 0xff);
}

RunConfig tiny_config(const fs::path& out) {
    RunConfig c;
    c.seed = 5;
    c.data_kind = SyntheticKind::blobs;
    c.synth.dim = 4;
    c.synth.spread = 0.1;
    c.synth.separation = 12;
    c.n_train = 48;
    c.n_val = 24;
    c.classes = 3;
    c.hidden = {6};
    c.train.epochs = 4;
    c.train.batch_size = 16;
    c.poison.eta_delta = 0.5;
    c.poison.q_weight = 10;
    c.poison.outer_epochs = 2;
    c.attack_samples = 8;
    c.noise_samples = 4;
    c.noise_trials = 10;
    c.attack.eps_grid = geometric_grid(1e-3, 1.0, 1.5);
    c.attack.pgd_steps = 4;
    c.attack.bisection_rounds = 6;
    c.defenses = {DefenseKind::none, DefenseKind::adversarial_training, DefenseKind::sam, DefenseKind::curvature_penalty};
    c.defense.at_steps = 2;
    c.sweep_fractions = {0.0, 0.5, 1.0};
    c.parity = true;
    c.emit_gnuplot = true;
    c.output_dir = out;
    return c;
}

std::vector<std::string> csv_files(const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".csv") out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST(Config, ParsesCommentsAndWhitespace) {
    const auto kv = parse_key_values("# header\n  a = 1  \n\nb=two # trailing\r\n c =  \n");
    EXPECT_EQ(kv.size(), 3u);
    EXPECT_EQ(kv.at("a"), "1");
    EXPECT_EQ(kv.at("b"), "two");
    EXPECT_EQ(kv.at("c"), "");
}

TEST(Config, SyntaxErrorsNameTheLine) {
    try {
        parse_key_values("a = 1\nbogus line\n", "x.conf");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("x.conf:2"), std::string::npos);
    }
    EXPECT_THROW(parse_key_values("a = 1\na = 2\n"), ConfigError);
    EXPECT_THROW(parse_key_values(" = 2\n"), ConfigError);
}

TEST(Config, RoundTripAndDigest) {
    RunConfig c = tiny_config("unused");
    c.attack.eps_grid = {0.01, 0.1, 0.3};
    const KeyValues kv = c.to_kv();
    const RunConfig back = RunConfig::from_kv(kv);
    EXPECT_EQ(back.to_kv(), kv);
    EXPECT_EQ(back.digest(), c.digest());
    RunConfig d = c;
    d.poison.epsilon = 0.04;
    EXPECT_NE(d.digest(), c.digest());
    d = c;
    d.output_dir = "elsewhere";
    EXPECT_EQ(d.digest(), c.digest());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(RunConfig::from_kv({{"poison.epsilonn", "0.1"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_kv({{"train.epochs", "-3"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_kv({{"poison.q_mode", "fast"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_kv({{"parity.enabled", "maybe"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_kv({{"attack.eps_grid", "geom:0.1:0.05:2"}}), ConfigError);
    RunConfig c = RunConfig::from_kv({{"poison.fraction", "1.5"}});
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_NO_THROW(RunConfig::from_kv({{"manifest.status", "complete"}}));
}

TEST(Config, GeometricGridAndNoiseList) {
    const RunConfig c = RunConfig::from_kv({{"attack.eps_grid", "geom:0.001:1:2"}, {"eval.noises", "gaussian:0.2, poisson"}});
    EXPECT_EQ(c.attack.eps_grid, geometric_grid(0.001, 1.0, 2.0));
    ASSERT_EQ(c.noises.size(), 2u);
    EXPECT_EQ(c.noises[0].param, 0.2);
    EXPECT_EQ(c.noises[1].kind, NoiseKind::poisson);
    EXPECT_EQ(c.noises[1].param, 64.0);
}

TEST(Config, ShippedConfigsValidate) {
    for (const char* name : {"desk_patches.conf", "parity_blobs.conf"}) {
        const RunConfig c = load_run_config(fs::path(DPA_SOURCE_DIR) / "tools" / "configs" / name);
        EXPECT_NO_THROW(c.validate()) << name;
    }
    EXPECT_THROW(load_run_config("/nonexistent/run.conf"), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
    for (Architecture a : {Architecture::mlp, Architecture::conv_mlp}) {
        ModelSpec s;
        s.architecture = a;
        s.activation = Activation::tanh;
        s.input_dim = 16;
        s.num_classes = 3;
        s.conv_channels = 2;
        s.conv_kernel = 3;
        s.layer_widths = {a == Architecture::mlp ? 16u : 8u, 5, 3};
        ModelState m = init_model(s, 42);
        m.params[0] = -0.0;
        m.params[1] = 1e-310;
        const ModelState back = decode_checkpoint(encode_checkpoint(m));
        EXPECT_EQ(back.spec, m.spec);
        EXPECT_EQ(back.rng_seed, m.rng_seed);
        ASSERT_EQ(back.params.numel(), m.params.numel());
        for (std::size_t i = 0; i < m.params.numel(); ++i)
            EXPECT_EQ(std::bit_cast<std::uint64_t>(back.params[i]), std::bit_cast<std::uint64_t>(m.params[i]));
    }
}

TEST(Checkpoint, FileRoundTrip) {
    const fs::path dir = scratch("ckpt");
    const ModelState m = dpa::testing::random_tanh_mlp(4, 2, 3);
    save_checkpoint(m, dir / "m.cvx1");
    EXPECT_EQ(encode_checkpoint(load_checkpoint(dir / "m.cvx1")), encode_checkpoint(m));
}

TEST(Checkpoint, CorruptionIsRejected) {
    const ModelState m = dpa::testing::random_tanh_mlp(4, 2, 3);
    const std::string good = encode_checkpoint(m);
    std::string s = good;
    flip_byte(s, s.size() - 20);  // inside the parameter payload
    EXPECT_THROW(decode_checkpoint(s), ChecksumError);
    s = good;
    s[0] = 'X';
    try {
        decode_checkpoint(s);
        FAIL();
    } catch (const BadMagicError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 9)), TruncatedError);
    s = good;
    s[4] = 9;
    EXPECT_THROW(decode_checkpoint(s), FormatError);
    EXPECT_THROW(decode_checkpoint(good + "x"), FormatError);
}

TEST(Perturbations, RoundTripIsBitwise) {
    PerturbationSet p = PerturbationSet::zeros(5, 3, 0.05);
    p.poisoned_indices = {1, 3};
    p.deltas.at(1, 0) = 0.05;
    p.deltas.at(1, 2) = -0.0125;
    p.deltas.at(3, 1) = -0.05;
    const std::string bytes = encode_perturbations(p);
    const PerturbationSet back = decode_perturbations(bytes);
    EXPECT_EQ(back.epsilon, p.epsilon);
    EXPECT_EQ(back.poisoned_indices, p.poisoned_indices);
    EXPECT_EQ(back.deltas, p.deltas);
    EXPECT_EQ(encode_perturbations(back), bytes);
    const fs::path dir = scratch("cvxp");
    save_perturbations(p, dir / "d.cvxp");
    EXPECT_EQ(load_perturbations(dir / "d.cvxp").deltas, p.deltas);
}

TEST(Perturbations, TamperingIsRejected) {
    PerturbationSet p = PerturbationSet::zeros(4, 2, 0.05);
    p.poisoned_indices = {0, 2};
    p.deltas.at(0, 0) = 0.03;
    const std::string good = encode_perturbations(p);
    std::string s = good;
    flip_byte(s, s.size() - 12);
    EXPECT_THROW(decode_perturbations(s), ChecksumError);

    // budget raised above ε with a valid checksum
    PerturbationSet big = p;
    big.deltas.at(2, 1) = 0.06;
    s = encode_perturbations(big);
    EXPECT_THROW(decode_perturbations(s), InvariantError);
    EXPECT_THROW(save_perturbations(big, scratch("bad") / "x.cvxp"), InvariantError);

    // non-zero δ on an unpoisoned row
    PerturbationSet stray = p;
    stray.deltas.at(1, 0) = 0.01;
    EXPECT_THROW(decode_perturbations(encode_perturbations(stray)), InvariantError);

    // epsilon field edited down, checksum recomputed
    s = good;
    const double eps = 0.01;
    const auto bits = std::bit_cast<std::uint64_t>(eps);
    for (int i = 0; i < 8; ++i) s[8 + i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    reseal(s);
    EXPECT_THROW(decode_perturbations(s), InvariantError);
}

TEST(Idx, AllWhiteImagesScaleToOne) {
    Dataset d;
    d.inputs = Tensor({2, 4}, std::vector<double>(8, 1.0));
    d.labels = {0, 1};
    const auto [img, lab] = dpa::testing::encode_idx(d, 2, 2);
    const Dataset back = decode_idx(img, lab);
    ASSERT_EQ(back.size(), 2u);
    for (double v : back.inputs.values()) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(back.num_classes, 2u);
}

TEST(Idx, RoundTripWithWriterIsBitwise) {
    Dataset d;
    std::vector<double> v(3 * 9);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = double((i * 37) % 256) / 255.0;
    d.inputs = Tensor({3, 9}, v);
    d.labels = {2, 0, 1};
    d.num_classes = 3;
    const auto [img, lab] = dpa::testing::encode_idx(d, 3, 3);
    const Dataset back = decode_idx(img, lab);
    EXPECT_EQ(back.inputs, d.inputs);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(dpa::testing::encode_idx(back, 3, 3), std::pair(img, lab));
    const fs::path dir = scratch("idx");
    write_file(dir / "i.idx", img);
    write_file(dir / "l.idx", lab);
    EXPECT_EQ(load_idx(dir / "i.idx", dir / "l.idx").inputs, d.inputs);
}

TEST(Idx, DistinctErrors) {
    Dataset d;
    d.inputs = Tensor({2, 4}, std::vector<double>(8, 0.5));
    d.labels = {0, 1};
    auto [img, lab] = dpa::testing::encode_idx(d, 2, 2);
    std::string bad = img;
    bad[3] = 0x02;
    try {
        decode_idx(bad, lab);
        FAIL();
    } catch (const BadMagicError& e) {
        EXPECT_EQ(e.offset(), 0u);
        EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
    }
    EXPECT_THROW(decode_idx(img, img), BadMagicError);
    EXPECT_THROW(decode_idx(img.substr(0, img.size() - 1), lab), TruncatedError);
    EXPECT_THROW(decode_idx(img.substr(0, 10), lab), TruncatedError);
    Dataset one;
    one.inputs = Tensor({1, 4}, std::vector<double>(4, 0.5));
    one.labels = {0};
    EXPECT_THROW(decode_idx(img, dpa::testing::encode_idx(one, 2, 2).second), CountMismatchError);
}

TEST(Csv, RowsCarrySeedAndDigest) {
    CsvTable t("t", {"a", "b"}, 7, "00ff");
    t.add({"x", fmt(0.5)});
    EXPECT_EQ(t.str(), "seed,config_digest,a,b\n7,00ff,x,0.5\n");
    EXPECT_THROW(t.add({"only"}), ShapeError);
}

class PipelineRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = scratch("pipeline_a");
        report_ = new PipelineReport(run_pipeline(tiny_config(dir_)));
    }
    static void TearDownTestSuite() { delete report_; }
    static fs::path dir_;
    static PipelineReport* report_;
};
fs::path PipelineRun::dir_;
PipelineReport* PipelineRun::report_ = nullptr;

TEST_F(PipelineRun, WritesEveryReportAndCompleteManifest) {
    const auto files = csv_files(dir_);
    for (const char* f : {"defense.csv", "fraction_sweep.csv", "loss_sensitivity.csv", "noise.csv", "qmode_parity.csv",
                          "robustness.csv"}) {
        EXPECT_NE(std::find(files.begin(), files.end(), f), files.end()) << f;
    }
    for (const char* f : {"clean.cvx1", "poisoned.cvx1", "perturbations.cvxp", "fraction_sweep.gp", "robustness.gp"})
        EXPECT_TRUE(fs::exists(dir_ / f)) << f;
    const KeyValues m = load_key_values(dir_ / "manifest.txt");
    EXPECT_EQ(m.at("manifest.status"), "complete");
    EXPECT_EQ(m.at("manifest.config_digest"), report_->config_digest);
    EXPECT_EQ(m.at("manifest.artifact.robustness.csv"), file_digest(dir_ / "robustness.csv"));
}

TEST_F(PipelineRun, EveryRowCarriesSeedAndDigest) {
    for (const auto& f : csv_files(dir_)) {
        const std::string text = read_file(dir_ / f);
        std::size_t pos = text.find('\n') + 1, rows = 0;
        while (pos < text.size()) {
            EXPECT_EQ(text.compare(pos, 2 + report_->config_digest.size(), "5," + report_->config_digest), 0) << f;
            pos = text.find('\n', pos) + 1;
            ++rows;
        }
        EXPECT_GT(rows, 0u) << f;
    }
}

TEST_F(PipelineRun, RerunFromManifestIsByteIdentical) {
    const fs::path other = scratch("pipeline_b");
    RunConfig c = load_run_config(dir_ / "manifest.txt");
    c.output_dir = other;
    run_pipeline(c);
    for (const auto& f : csv_files(dir_)) EXPECT_EQ(read_file(dir_ / f), read_file(other / f)) << f;
    for (const char* f : {"clean.cvx1", "poisoned.cvx1", "perturbations.cvxp"})
        EXPECT_EQ(read_file(dir_ / f), read_file(other / f)) << f;
}

TEST_F(PipelineRun, FractionZeroEqualsClean) {
    ASSERT_EQ(report_->sweep.front().first, 0.0);
    const ModelEval& z = report_->sweep.front().second;
    EXPECT_EQ(z.checkpoint_digest, report_->clean.checkpoint_digest);
    EXPECT_EQ(z.robustness.deepfool.rho, report_->clean.robustness.deepfool.rho);
    EXPECT_EQ(z.robustness.fgsm.rho, report_->clean.robustness.fgsm.rho);
}

TEST_F(PipelineRun, EvaluatesRetrainedVictimNotSurrogate) {
    EXPECT_NE(report_->surrogate_digest, report_->poisoned.checkpoint_digest);
    const ModelState victim = load_checkpoint(dir_ / "poisoned.cvx1");
    EXPECT_EQ(hex64(fnv1a64(encode_checkpoint(victim))), report_->poisoned.checkpoint_digest);
    const RunConfig c = tiny_config(dir_);
    const DataSplits data = build_data(c);
    const ModelEval e = evaluate_model("poisoned", victim, data.val, c);
    EXPECT_EQ(e.robustness.deepfool.rho, report_->poisoned.robustness.deepfool.rho);
    EXPECT_EQ(e.accuracy, report_->poisoned.accuracy);
}

TEST_F(PipelineRun, PerturbationsRespectBudget) {
    const PerturbationSet p = load_perturbations(dir_ / "perturbations.cvxp");
    EXPECT_LE(p.max_abs(), tiny_config(dir_).poison.epsilon);
    EXPECT_EQ(p.poisoned_indices.size(), 48u);
}

TEST(Pipeline, StageFailureMarksManifestIncomplete) {
    const fs::path dir = scratch("pipeline_fail");
    RunConfig c = tiny_config(dir);
    c.source = DataSource::idx;
    c.idx_train_images = c.idx_train_labels = c.idx_val_images = c.idx_val_labels = (dir / "missing.idx").string();
    try {
        run_pipeline(c);
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "data");
    }
    const KeyValues m = load_key_values(dir / "manifest.txt");
    EXPECT_EQ(m.at("manifest.status"), "incomplete");
    EXPECT_EQ(m.at("manifest.failed_stage"), "data");
}

TEST(Cli, ExitCodes) {
    const fs::path dir = scratch("cli");
    const std::string cli = DPA_CLI_PATH;
    auto run = [&](const std::string& args) {
        const int status = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    };
    write_file(dir / "bad.conf", "poison.epsilon = lots\n");
    EXPECT_EQ(run("train --config " + (dir / "bad.conf").string() + " --out " + dir.string()), 2);
    EXPECT_EQ(run("pipeline --bogus-flag"), 2);
    write_file(dir / "blowup.conf",
               "data.kind = blobs\ndata.dim = 4\ndata.n_train = 32\ndata.n_val = 8\nmodel.hidden = 4\n"
               "model.activation = relu\ntrain.epochs = 3\ntrain.learning_rate = 1e300\n");
    EXPECT_EQ(run("train --config " + (dir / "blowup.conf").string() + " --out " + dir.string()), 3);
    write_file(dir / "ok.conf", "data.kind = blobs\ndata.dim = 4\ndata.n_train = 32\ndata.n_val = 8\nmodel.hidden = 4\ntrain.epochs = 2\n");
    EXPECT_EQ(run("train --config " + (dir / "ok.conf").string() + " --seed 3 --out " + dir.string()), 0);
    EXPECT_TRUE(fs::exists(dir / "clean.cvx1"));
    EXPECT_EQ(run("attack-eval --model " + (dir / "clean.cvx1").string() + " --config " + (dir / "ok.conf").string() +
                  " --seed 3 --out " + dir.string()),
              0);
    EXPECT_TRUE(fs::exists(dir / "attack_eval.csv"));
}
