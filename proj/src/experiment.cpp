#include "semprobe/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"

#include "semprobe/tensor.hpp"

namespace semprobe {

namespace {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Seed stream tag for model construction, far away from the small episode
// indices evaluate derives from the same base seed.
constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;

[[noreturn]] void bad_field(const std::string& key, const std::string& want) {
    throw std::runtime_error("config: field `" + key + "` " + want);
}

double as_number(const ojson& v, const std::string& key) {
    if (!v.is_number()) bad_field(key, "must be a number");
    return v.get<double>();
}

std::size_t as_count(const ojson& v, const std::string& key) {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    bad_field(key, "must be a non-negative integer");
}

std::string as_text(const ojson& v, const std::string& key) {
    if (!v.is_string()) bad_field(key, "must be a string");
    return v.get<std::string>();
}

bool as_flag(const ojson& v, const std::string& key) {
    if (!v.is_boolean()) bad_field(key, "must be true or false");
    return v.get<bool>();
}

std::vector<std::uint64_t> as_seed_list(const ojson& v,
                                        const std::string& key) {
    if (!v.is_array()) {
        bad_field(key, "must be an array of non-negative integers");
    }
    std::vector<std::uint64_t> out;
    out.reserve(v.size());
    for (const ojson& e : v) {
        if (!e.is_number_unsigned()) {
            bad_field(key, "must be an array of non-negative integers");
        }
        out.push_back(e.get<std::uint64_t>());
    }
    return out;
}

std::pair<std::size_t, std::size_t> parse_ear_layers(const std::string& s,
                                                     std::size_t layers) {
    auto fail = [&]() -> std::pair<std::size_t, std::size_t> {
        throw std::runtime_error(
            "config: field `ear_layers` must be \"first-last\" with 1 <= "
            "first <= last <= " +
            std::to_string(layers) + ", got `" + s + "`");
    };
    const char* begin = s.data();
    const char* end = begin + s.size();
    std::size_t first = 0;
    auto r1 = std::from_chars(begin, end, first);
    if (r1.ec != std::errc{}) return fail();
    std::size_t last = first;
    if (r1.ptr != end) {
        if (*r1.ptr != '-') return fail();
        auto r2 = std::from_chars(r1.ptr + 1, end, last);
        if (r2.ec != std::errc{} || r2.ptr != end) return fail();
    }
    if (first < 1 || last < first || last > layers) return fail();
    return {first, last};
}

ojson spec_to_ojson(const SynthDomainSpec& d) {
    ojson j;
    j["num_classes"] = d.num_classes;
    j["d_in"] = d.d_in;
    j["patches"] = d.patches;
    j["k_disc"] = d.k_disc;
    j["signal_scale"] = d.signal_scale;
    j["noise_scale"] = d.noise_scale;
    j["shift"] = d.shift;
    j["images_per_class"] = d.images_per_class;
    j["prompts_per_class"] = d.prompts_per_class;
    j["vocab"] = d.vocab;
    j["prompt_len"] = d.prompt_len;
    j["signature_tokens"] = d.signature_tokens;
    j["seed"] = d.seed;
    return j;
}

SynthDomainSpec spec_from_ojson(const ojson& j) {
    if (!j.is_object()) bad_field("data", "must be an object");
    SynthDomainSpec d;
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        const ojson& v = item.value();
        const std::string path = "data." + key;
        if (key == "num_classes") d.num_classes = as_count(v, path);
        else if (key == "d_in") d.d_in = as_count(v, path);
        else if (key == "patches") d.patches = as_count(v, path);
        else if (key == "k_disc") d.k_disc = as_count(v, path);
        else if (key == "signal_scale") d.signal_scale = as_number(v, path);
        else if (key == "noise_scale") d.noise_scale = as_number(v, path);
        else if (key == "shift") d.shift = as_number(v, path);
        else if (key == "images_per_class")
            d.images_per_class = as_count(v, path);
        else if (key == "prompts_per_class")
            d.prompts_per_class = as_count(v, path);
        else if (key == "vocab") d.vocab = as_count(v, path);
        else if (key == "prompt_len") d.prompt_len = as_count(v, path);
        else if (key == "signature_tokens")
            d.signature_tokens = as_count(v, path);
        else if (key == "seed") {
            if (!v.is_number_unsigned()) {
                bad_field(path, "must be a non-negative integer");
            }
            d.seed = v.get<std::uint64_t>();
        } else {
            throw std::runtime_error("config: unknown field `" + path + "`");
        }
    }
    return d;
}

ojson config_to_ojson(const ExperimentConfig& c) {
    ojson j;
    j["label"] = c.label;
    j["mode"] = c.mode;
    j["ear_on"] = c.ear_on;
    j["ear_layers"] = c.ear_layers;
    j["alpha"] = c.alpha;
    j["loss"] = c.loss;
    j["w"] = c.w;
    j["k"] = c.k;
    j["T"] = c.T;
    j["fixed_beta"] = c.fixed_beta;
    j["tau"] = c.tau;
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["n_way"] = c.n_way;
    j["k_shot"] = c.k_shot;
    j["m_query"] = c.m_query;
    j["u_prompts"] = c.u_prompts;
    j["episodes_count"] = c.episodes_count;
    j["workers"] = c.workers;
    j["seeds"] = c.seeds;
    j["data"] = spec_to_ojson(c.data);
    return j;
}

ExperimentConfig config_from_ojson(const ojson& j) {
    if (!j.is_object()) {
        throw std::runtime_error("config: root must be a JSON object");
    }
    ExperimentConfig c;
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        const ojson& v = item.value();
        if (key == "label") c.label = as_text(v, key);
        else if (key == "mode") c.mode = as_text(v, key);
        else if (key == "ear_on") c.ear_on = as_flag(v, key);
        else if (key == "ear_layers") c.ear_layers = as_text(v, key);
        else if (key == "alpha") c.alpha = as_number(v, key);
        else if (key == "loss") c.loss = as_text(v, key);
        else if (key == "w") c.w = as_number(v, key);
        else if (key == "k") c.k = as_number(v, key);
        else if (key == "T") c.T = as_number(v, key);
        else if (key == "fixed_beta") c.fixed_beta = as_number(v, key);
        else if (key == "tau") c.tau = as_number(v, key);
        else if (key == "lr") c.lr = as_number(v, key);
        else if (key == "epochs") c.epochs = as_count(v, key);
        else if (key == "n_way") c.n_way = as_count(v, key);
        else if (key == "k_shot") c.k_shot = as_count(v, key);
        else if (key == "m_query") c.m_query = as_count(v, key);
        else if (key == "u_prompts") c.u_prompts = as_count(v, key);
        else if (key == "episodes_count")
            c.episodes_count = as_count(v, key);
        else if (key == "workers") c.workers = as_count(v, key);
        else if (key == "seeds") c.seeds = as_seed_list(v, key);
        else if (key == "data") c.data = spec_from_ojson(v);
        else {
            throw std::runtime_error("config: unknown field `" + key + "`");
        }
    }
    c.validate();
    return c;
}

std::string f17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string f4(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", x);
    return buf;
}

std::string trace_csv_text(const std::vector<EpochRecord>& trace) {
    std::string s;
    s += kTraceVersionLine;
    s += '\n';
    s += kTraceHeaderLine;
    s += '\n';
    for (const EpochRecord& r : trace) {
        s += std::to_string(r.epoch);
        s += ',';
        s += f17(r.l1);
        s += ',';
        s += f17(r.l2);
        s += ',';
        s += f17(r.beta);
        s += ',';
        s += f17(r.report.align_score);
        s += ',';
        s += f17(r.report.modality_gap);
        s += ',';
        s += f17(r.report.ch_image);
        s += ',';
        s += f17(r.report.ch_text);
        s += ',';
        s += f17(r.report.entropy_cls);
        s += ',';
        s += f17(r.report.entropy_rectified);
        s += '\n';
    }
    return s;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write `" + path + "`");
    f << text;
    if (!f) throw std::runtime_error("cannot write `" + path + "`");
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open `" + path + "`");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

ojson record_to_ojson(const EpochRecord& r) {
    ojson j;
    j["epoch"] = r.epoch;
    j["L1"] = r.l1;
    j["L2"] = r.l2;
    j["beta"] = r.beta;
    j["align_score"] = r.report.align_score;
    j["modality_gap"] = r.report.modality_gap;
    j["ch_image"] = r.report.ch_image;
    j["ch_text"] = r.report.ch_text;
    j["entropy_cls"] = r.report.entropy_cls;
    j["entropy_eos"] = r.report.entropy_eos;
    j["entropy_rectified"] = r.report.entropy_rectified;
    return j;
}

// NaN serializes as JSON null; read it back as NaN.
double num_or_nan(const ojson& v) {
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    return v.get<double>();
}

void mean_ci(const std::vector<double>& xs, double& mean, double& ci) {
    mean = 0.0;
    ci = 0.0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    if (xs.size() < 2) return;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= double(xs.size() - 1);
    ci = 1.96 * std::sqrt(var / double(xs.size()));
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
        if (ch == '"') q += "\"\"";
        else q += ch;
    }
    q += '"';
    return q;
}

std::string sanitize_path_piece(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char ch : s) {
        const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                        (ch >= '0' && ch <= '9') || ch == '.' || ch == '-' ||
                        ch == '_';
        out += ok ? ch : '_';
    }
    return out;
}

std::string summary_text(const ExperimentOutcome& o) {
    const ExperimentConfig& c = o.config;
    std::ostringstream s;
    s << "run: " << c.label << "\n";
    s << "arm: mode=" << c.mode << "  ear=" << (c.ear_on ? "on" : "off");
    if (c.ear_on) {
        s << " (layers " << c.ear_layers << ", alpha=" << c.alpha << ")";
    }
    s << "  loss=" << c.loss;
    if (c.loss == "bas") {
        s << " (w=" << c.w << ", k=" << c.k << ", T=" << c.T << ")";
    } else if (c.loss == "fixed_beta") {
        s << " (beta=" << c.fixed_beta << ")";
    }
    s << "\n";
    s << "protocol: " << c.n_way << "-way " << c.k_shot << "-shot, M="
      << c.m_query << " queries, U=" << c.u_prompts << " prompts, "
      << c.episodes_count << " episodes, " << c.epochs << " epochs, lr="
      << c.lr << ", tau=" << c.tau << "\n";
    s << "data: " << c.data.num_classes << " classes, " << c.data.patches
      << " patches x " << c.data.d_in << " dims (" << c.data.k_disc
      << " discriminative), signal=" << c.data.signal_scale << ", noise="
      << c.data.noise_scale << ", shift=" << c.data.shift << ", seed="
      << c.data.seed << "\n\n";
    for (const SeedOutcome& so : o.per_seed) {
        s << "seed " << so.seed << ": accuracy " << f4(so.result.mean_accuracy)
          << " +/- " << f4(so.result.ci_half_width) << " (95% CI, "
          << so.result.accuracies.size() << " episodes)\n";
    }
    s << "pooled over " << o.per_seed.size() << " seed(s), "
      << o.pooled_episodes << " episodes: " << f4(o.pooled_mean) << " +/- "
      << f4(o.pooled_ci) << "\n\n";
    const EpochRecord& r = o.final_mean;
    s << "final-epoch diagnostics (mean over seeds):\n";
    s << "  L1=" << f4(r.l1) << "  L2=" << f4(r.l2) << "  beta=" << f4(r.beta)
      << "\n";
    s << "  align_score=" << f4(r.report.align_score) << "  modality_gap="
      << f4(r.report.modality_gap) << "\n";
    s << "  ch_image=" << f4(r.report.ch_image) << "  ch_text="
      << f4(r.report.ch_text) << "\n";
    s << "  entropy_cls=" << f4(r.report.entropy_cls)
      << "  entropy_rectified=" << f4(r.report.entropy_rectified) << "\n";
    return s.str();
}

void write_partial_trace(const std::string& out_dir,
                         const std::vector<EpochRecord>& partial) {
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "trace.csv").string(),
               trace_csv_text(partial));
}

const char* const kCompareColumns =
    "label,mean_accuracy,ci_half_width,align_score,modality_gap,ch_image,"
    "ch_text,entropy_cls,entropy_rectified";

std::string compare_csv_row(const CompareRow& r) {
    std::string s = csv_field(r.label);
    s += ',';
    s += f17(r.mean_accuracy);
    s += ',';
    s += f17(r.ci_half_width);
    s += ',';
    s += f17(r.align_score);
    s += ',';
    s += f17(r.modality_gap);
    s += ',';
    s += f17(r.ch_image);
    s += ',';
    s += f17(r.ch_text);
    s += ',';
    s += f17(r.entropy_cls);
    s += ',';
    s += f17(r.entropy_rectified);
    return s;
}

void sort_rows(std::vector<CompareRow>& rows) {
    std::sort(rows.begin(), rows.end(),
              [](const CompareRow& a, const CompareRow& b) {
                  if (a.label != b.label) return a.label < b.label;
                  return a.dir < b.dir;
              });
}

} // namespace

const char* const kTraceVersionLine = "# semprobe-trace v1";
const char* const kTraceHeaderLine =
    "epoch,L1,L2,beta,align_score,modality_gap,ch_image,ch_text,entropy_cls,"
    "entropy_rectified";

void ExperimentConfig::validate() const {
    if (label.empty()) bad_field("label", "must be non-empty");
    try {
        tune_mode_from_string(mode);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: field `mode`: ") +
                                 e.what());
    }
    try {
        loss_kind_from_string(loss);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: field `loss`: ") +
                                 e.what());
    }
    parse_ear_layers(ear_layers, EncoderConfig{}.layers);
    if (!std::isfinite(alpha) || alpha < 0.0 || alpha > 1.0) {
        bad_field("alpha", "must lie in [0, 1]");
    }
    if (!std::isfinite(w) || w < 0.0) bad_field("w", "must be finite and >= 0");
    if (!std::isfinite(k) || k <= 0.0) bad_field("k", "must be finite and > 0");
    if (!std::isfinite(T) || T < 0.0) bad_field("T", "must be finite and >= 0");
    if (!std::isfinite(fixed_beta) || fixed_beta < 0.0) {
        bad_field("fixed_beta", "must be finite and >= 0");
    }
    if (!std::isfinite(tau) || tau <= 0.0) {
        bad_field("tau", "must be finite and > 0");
    }
    if (!std::isfinite(lr) || lr <= 0.0) {
        bad_field("lr", "must be finite and > 0");
    }
    if (epochs < 1) bad_field("epochs", "must be >= 1");
    if (n_way < 1) bad_field("n_way", "must be >= 1");
    if (k_shot < 1) bad_field("k_shot", "must be >= 1");
    if (m_query < 1) bad_field("m_query", "must be >= 1");
    if (u_prompts < 1) bad_field("u_prompts", "must be >= 1");
    if (episodes_count < 1) bad_field("episodes_count", "must be >= 1");
    if (workers < 1) bad_field("workers", "must be >= 1");
    if (seeds.empty()) bad_field("seeds", "must be a non-empty array");
    data.validate();
    if (n_way > data.num_classes) {
        bad_field("n_way", "(" + std::to_string(n_way) +
                               ") cannot exceed data.num_classes (" +
                               std::to_string(data.num_classes) + ")");
    }
    if (k_shot + m_query > data.images_per_class) {
        throw std::runtime_error(
            "config: fields `k_shot` + `m_query` (" +
            std::to_string(k_shot + m_query) +
            ") cannot exceed data.images_per_class (" +
            std::to_string(data.images_per_class) + ")");
    }
    if (u_prompts > data.prompts_per_class) {
        bad_field("u_prompts", "(" + std::to_string(u_prompts) +
                                   ") cannot exceed data.prompts_per_class (" +
                                   std::to_string(data.prompts_per_class) +
                                   ")");
    }
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

std::string config_to_json(const ExperimentConfig& cfg) {
    return config_to_ojson(cfg).dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
    ojson j;
    try {
        j = ojson::parse(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: invalid JSON: ") +
                                 e.what());
    }
    return config_from_ojson(j);
}

ExperimentConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: ") + e.what());
    }
    return config_from_json(text);
}

EncoderConfig encoder_config_for(const ExperimentConfig& cfg) {
    EncoderConfig enc; // backbone widths stay at their defaults
    enc.d_in = cfg.data.d_in;
    enc.patches = cfg.data.patches;
    enc.vocab = cfg.data.vocab;
    enc.max_text_len =
        std::max(enc.max_text_len, cfg.data.prompt_len + 1);
    auto range = parse_ear_layers(cfg.ear_layers, enc.layers);
    enc.ear_first = range.first;
    enc.ear_last = range.second;
    enc.validate();
    return enc;
}

EvalOptions eval_options_for(const ExperimentConfig& cfg,
                             std::uint64_t seed) {
    EvalOptions opt;
    opt.n_way = cfg.n_way;
    opt.k_shot = cfg.k_shot;
    opt.m_query = cfg.m_query;
    opt.u_prompts = cfg.u_prompts;
    opt.episodes_count = cfg.episodes_count;
    opt.seed = seed;
    opt.workers = cfg.workers;
    opt.tune.ear_on = cfg.ear_on;
    opt.tune.alpha = cfg.alpha;
    opt.tune.loss = loss_kind_from_string(cfg.loss);
    opt.tune.bas.w = cfg.w;
    opt.tune.bas.k = cfg.k;
    opt.tune.bas.T = cfg.T;
    opt.tune.bas.fixed_beta.reset();
    opt.tune.fixed_beta = cfg.fixed_beta;
    opt.tune.epochs = cfg.epochs;
    opt.tune.lr = cfg.lr;
    opt.tune.tau = cfg.tau;
    opt.tune.seed = seed;
    return opt;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const EncoderConfig enc = encoder_config_for(cfg);
    const SynthDataset data = generate_dataset(cfg.data);

    ExperimentOutcome out;
    out.config = cfg;
    out.per_seed.reserve(cfg.seeds.size());
    for (std::uint64_t s : cfg.seeds) {
        DualEncoder base = make_dual_encoder(enc, derive_seed(s, kModelStream));
        base.mode = tune_mode_from_string(cfg.mode);
        SeedOutcome so;
        so.seed = s;
        so.result = evaluate(data, base, eval_options_for(cfg, s));
        out.per_seed.push_back(std::move(so));
    }

    std::vector<double> all;
    for (const SeedOutcome& so : out.per_seed) {
        all.insert(all.end(), so.result.accuracies.begin(),
                   so.result.accuracies.end());
    }
    out.pooled_episodes = all.size();
    mean_ci(all, out.pooled_mean, out.pooled_ci);

    const double n = double(out.per_seed.size());
    EpochRecord& fm = out.final_mean;
    for (const SeedOutcome& so : out.per_seed) {
        const EpochRecord& last = so.result.trace.back();
        fm.epoch = last.epoch;
        fm.l1 += last.l1 / n;
        fm.l2 += last.l2 / n;
        fm.beta += last.beta / n;
        fm.report.align_score += last.report.align_score / n;
        fm.report.modality_gap += last.report.modality_gap / n;
        fm.report.ch_image += last.report.ch_image / n;
        fm.report.ch_text += last.report.ch_text / n;
        fm.report.entropy_cls += last.report.entropy_cls / n;
        fm.report.entropy_eos += last.report.entropy_eos / n;
        fm.report.entropy_rectified += last.report.entropy_rectified / n;
    }
    return out;
}

void write_run_artifacts(const ExperimentOutcome& outcome,
                         const std::string& out_dir) {
    fs::create_directories(out_dir);

    ojson root;
    root["label"] = outcome.config.label;
    root["config"] = config_to_ojson(outcome.config);
    root["per_seed"] = ojson::array();
    for (const SeedOutcome& so : outcome.per_seed) {
        ojson s;
        s["seed"] = so.seed;
        s["mean_accuracy"] = so.result.mean_accuracy;
        s["ci_half_width"] = so.result.ci_half_width;
        s["accuracies"] = so.result.accuracies;
        s["final"] = record_to_ojson(so.result.trace.back());
        root["per_seed"].push_back(std::move(s));
    }
    root["pooled"] = {{"episodes", outcome.pooled_episodes},
                      {"mean_accuracy", outcome.pooled_mean},
                      {"ci_half_width", outcome.pooled_ci}};
    root["final_mean"] = record_to_ojson(outcome.final_mean);

    const fs::path dir(out_dir);
    write_file((dir / "result.json").string(), root.dump(2) + "\n");
    write_file((dir / "trace.csv").string(),
               trace_csv_text(outcome.per_seed.front().result.trace));
    write_file((dir / "summary.txt").string(), summary_text(outcome));
}

CompareRow load_run_dir(const std::string& dir) {
    const std::string path = (fs::path(dir) / "result.json").string();
    CompareRow row;
    row.dir = dir;
    try {
        const ojson j = ojson::parse(read_file(path));
        row.label = j.at("label").get<std::string>();
        row.mean_accuracy = num_or_nan(j.at("pooled").at("mean_accuracy"));
        row.ci_half_width = num_or_nan(j.at("pooled").at("ci_half_width"));
        const ojson& fin = j.at("final_mean");
        row.align_score = num_or_nan(fin.at("align_score"));
        row.modality_gap = num_or_nan(fin.at("modality_gap"));
        row.ch_image = num_or_nan(fin.at("ch_image"));
        row.ch_text = num_or_nan(fin.at("ch_text"));
        row.entropy_cls = num_or_nan(fin.at("entropy_cls"));
        row.entropy_rectified = num_or_nan(fin.at("entropy_rectified"));
    } catch (const std::exception& e) {
        throw std::runtime_error("compare: cannot read `" + path +
                                 "`: " + e.what());
    }
    return row;
}

std::string compare_table(std::vector<CompareRow> rows) {
    sort_rows(rows);
    std::size_t width = 5;
    for (const CompareRow& r : rows) width = std::max(width, r.label.size());
    std::ostringstream s;
    s << std::left;
    s.width(std::streamsize(width));
    s << "label";
    const char* heads[] = {"mean_acc", "ci95",   "align", "gap",
                           "ch_image", "ch_text", "H_cls", "H_rect"};
    for (const char* h : heads) {
        s << "  ";
        s.width(9);
        s << std::right << h << std::left;
    }
    s << "\n";
    for (const CompareRow& r : rows) {
        s.width(std::streamsize(width));
        s << r.label;
        const double vals[] = {r.mean_accuracy, r.ci_half_width,
                               r.align_score,   r.modality_gap,
                               r.ch_image,      r.ch_text,
                               r.entropy_cls,   r.entropy_rectified};
        for (double v : vals) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "  %9.4f", v);
            s << buf;
        }
        s << "\n";
    }
    return s.str();
}

std::string compare_csv(std::vector<CompareRow> rows) {
    sort_rows(rows);
    std::string s = kCompareColumns;
    s += '\n';
    for (const CompareRow& r : rows) {
        s += compare_csv_row(r);
        s += '\n';
    }
    return s;
}

std::vector<std::string> split_value_list(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    auto push = [&]() {
        const auto b = cur.find_first_not_of(" \t");
        const auto e = cur.find_last_not_of(" \t");
        if (b == std::string::npos) {
            throw std::runtime_error(
                "sweep: `--values` must be a non-empty comma-separated list "
                "of non-empty entries");
        }
        out.push_back(cur.substr(b, e - b + 1));
        cur.clear();
    };
    for (char ch : csv) {
        if (ch == ',') push();
        else cur += ch;
    }
    push();
    return out;
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::optional<std::size_t> workers,
            std::optional<std::uint64_t> seed, std::ostream& out,
            std::ostream& err) {
    try {
        ExperimentConfig cfg = load_config(config_path);
        if (seed) cfg.seeds = {*seed};
        if (workers) cfg.workers = *workers;
        cfg.validate();
        const ExperimentOutcome res = run_experiment(cfg);
        write_run_artifacts(res, out_dir);
        out << "run `" << cfg.label << "`: accuracy " << f4(res.pooled_mean)
            << " +/- " << f4(res.pooled_ci) << " over " << res.pooled_episodes
            << " episodes\n";
        out << "wrote " << out_dir << "/{result.json, trace.csv, summary.txt}"
            << "\n";
        return 0;
    } catch (const FinetuneAbort& ab) {
        try {
            write_partial_trace(out_dir, ab.partial);
            err << "run aborted: " << ab.what() << "\n";
            err << "partial trace (" << ab.partial.size()
                << " epochs) preserved in " << out_dir << "/trace.csv\n";
        } catch (const std::exception& e) {
            err << "run aborted: " << ab.what() << "\n";
            err << "error: could not preserve partial trace: " << e.what()
                << "\n";
        }
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_compare(const std::vector<std::string>& dirs,
                const std::string& csv_path, std::ostream& out,
                std::ostream& err) {
    try {
        if (dirs.empty()) {
            throw std::runtime_error(
                "compare: at least one run directory is required");
        }
        std::vector<CompareRow> rows;
        rows.reserve(dirs.size());
        for (const std::string& d : dirs) rows.push_back(load_run_dir(d));
        out << compare_table(rows);
        write_file(csv_path, compare_csv(rows));
        out << "wrote " << csv_path << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_sweep(const std::string& config_path, const std::string& param,
              const std::string& values_csv, const std::string& out_dir,
              std::optional<std::size_t> workers, std::ostream& out,
              std::ostream& err) {
    std::string active_dir = out_dir;
    try {
        ExperimentConfig base = load_config(config_path);
        if (workers) base.workers = *workers;
        const std::vector<std::string> values = split_value_list(values_csv);
        const ojson base_json = config_to_ojson(base);

        // Dotted path through the config JSON, e.g. "alpha", "data.shift".
        std::vector<std::string> parts;
        {
            std::string cur;
            for (char ch : param) {
                if (ch == '.') {
                    parts.push_back(cur);
                    cur.clear();
                } else {
                    cur += ch;
                }
            }
            parts.push_back(cur);
        }

        std::string agg = "value,";
        agg += kCompareColumns;
        agg += '\n';
        std::set<std::string> used;
        for (const std::string& v : values) {
            ojson j = base_json;
            ojson* node = &j;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                if (!node->is_object() || !node->contains(parts[i])) {
                    throw std::runtime_error("sweep: unknown parameter `" +
                                             param + "`");
                }
                node = &(*node)[parts[i]];
            }
            if (!node->is_object() || !node->contains(parts.back())) {
                throw std::runtime_error("sweep: unknown parameter `" + param +
                                         "`");
            }
            ojson lit;
            try {
                lit = ojson::parse(v);
                if (!lit.is_number() && !lit.is_boolean()) lit = v;
            } catch (const std::exception&) {
                lit = v;
            }
            (*node)[parts.back()] = lit;
            ExperimentConfig cfg = config_from_json(j.dump());
            if (param != "label") {
                cfg.label = base.label + "[" + param + "=" + v + "]";
            }

            std::string piece =
                sanitize_path_piece(param) + "_" + sanitize_path_piece(v);
            while (used.count(piece)) piece += "_x";
            used.insert(piece);
            const std::string dir =
                (fs::path(out_dir) / piece).string();
            active_dir = dir;

            const ExperimentOutcome res = run_experiment(cfg);
            write_run_artifacts(res, dir);
            out << param << "=" << v << ": accuracy " << f4(res.pooled_mean)
                << " +/- " << f4(res.pooled_ci) << "  -> " << dir << "\n";

            CompareRow row;
            row.label = cfg.label;
            row.mean_accuracy = res.pooled_mean;
            row.ci_half_width = res.pooled_ci;
            row.align_score = res.final_mean.report.align_score;
            row.modality_gap = res.final_mean.report.modality_gap;
            row.ch_image = res.final_mean.report.ch_image;
            row.ch_text = res.final_mean.report.ch_text;
            row.entropy_cls = res.final_mean.report.entropy_cls;
            row.entropy_rectified = res.final_mean.report.entropy_rectified;
            agg += csv_field(v) + "," + compare_csv_row(row) + "\n";
        }
        fs::create_directories(out_dir);
        const std::string agg_path =
            (fs::path(out_dir) / "sweep.csv").string();
        write_file(agg_path, agg);
        out << "wrote " << agg_path << "\n";
        return 0;
    } catch (const FinetuneAbort& ab) {
        try {
            write_partial_trace(active_dir, ab.partial);
            err << "sweep aborted: " << ab.what() << "\n";
            err << "partial trace (" << ab.partial.size()
                << " epochs) preserved in " << active_dir << "/trace.csv\n";
        } catch (const std::exception& e) {
            err << "sweep aborted: " << ab.what() << "\n";
            err << "error: could not preserve partial trace: " << e.what()
                << "\n";
        }
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_print_defaults(std::ostream& out) {
    out << config_to_json(default_config());
    return 0;
}

} // namespace semprobe
