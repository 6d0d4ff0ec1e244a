#include "semprobe/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace semprobe {

namespace {

void require_field(bool ok, const char* field, const char* what) {
    if (!ok) {
        throw std::runtime_error(std::string("synth spec: field `") + field +
                                 "` " + what);
    }
}

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Unit-sphere draw as plain doubles (the generator never needs autodiff).
std::vector<double> unit_vector(std::size_t d, Rng& rng) {
    std::vector<double> v(d);
    double s = 0.0;
    do {
        s = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            v[i] = rng.normal();
            s += v[i] * v[i];
        }
    } while (s < 1e-12);
    double inv = 1.0 / std::sqrt(s);
    for (double& x : v) x *= inv;
    return v;
}

std::string spec_text(const SynthDomainSpec& s) {
    std::ostringstream out;
    out << "num_classes " << s.num_classes << "\n"
        << "d_in " << s.d_in << "\n"
        << "patches " << s.patches << "\n"
        << "k_disc " << s.k_disc << "\n"
        << "signal_scale " << fmt17(s.signal_scale) << "\n"
        << "noise_scale " << fmt17(s.noise_scale) << "\n"
        << "shift " << fmt17(s.shift) << "\n"
        << "images_per_class " << s.images_per_class << "\n"
        << "prompts_per_class " << s.prompts_per_class << "\n"
        << "vocab " << s.vocab << "\n"
        << "prompt_len " << s.prompt_len << "\n"
        << "signature_tokens " << s.signature_tokens << "\n"
        << "seed " << s.seed << "\n";
    return out.str();
}

void expect_word(std::istream& in, const std::string& want,
                 const std::string& path) {
    std::string got;
    if (!(in >> got) || got != want) {
        throw std::runtime_error("dataset archive " + path + ": expected `" +
                                 want + "`, got `" + got + "`");
    }
}

} // namespace

void SynthDomainSpec::validate() const {
    require_field(num_classes >= 1, "num_classes", "must be >= 1");
    require_field(d_in >= 1, "d_in", "must be >= 1");
    require_field(patches >= 1, "patches", "must be >= 1");
    require_field(k_disc >= 1 && k_disc <= patches, "k_disc",
                  "must lie in [1, patches]");
    require_field(std::isfinite(signal_scale) && signal_scale > 0.0,
                  "signal_scale", "must be finite and > 0");
    require_field(std::isfinite(noise_scale) && noise_scale >= 0.0,
                  "noise_scale", "must be finite and >= 0");
    require_field(std::isfinite(shift) && shift >= 0.0, "shift",
                  "must be finite and >= 0");
    require_field(images_per_class >= 1, "images_per_class", "must be >= 1");
    require_field(prompts_per_class >= 1, "prompts_per_class",
                  "must be >= 1");
    require_field(signature_tokens >= 1, "signature_tokens", "must be >= 1");
    require_field(prompt_len >= signature_tokens, "prompt_len",
                  "must be >= signature_tokens");
    // Token 0 is EOS; each class owns `signature_tokens` ids above it, and
    // filler ids must exist above the signature range.
    require_field(vocab > 1 + num_classes * signature_tokens, "vocab",
                  "must exceed 1 + num_classes * signature_tokens");
}

SynthDataset generate_dataset(const SynthDomainSpec& spec) {
    spec.validate();
    SynthDataset ds;
    ds.spec = spec;

    Rng proto_rng(derive_seed(spec.seed, 0));
    std::vector<double> proto_flat;
    proto_flat.reserve(spec.num_classes * spec.d_in);
    std::vector<std::vector<double>> protos(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        protos[c] = unit_vector(spec.d_in, proto_rng);
        proto_flat.insert(proto_flat.end(), protos[c].begin(),
                          protos[c].end());
    }
    ds.prototypes =
        Tensor::from_data({spec.num_classes, spec.d_in}, proto_flat);

    Rng dir_rng(derive_seed(spec.seed, 1));
    std::vector<double> dir = unit_vector(spec.d_in, dir_rng);
    ds.shift_direction = Tensor::from_data({spec.d_in}, dir);

    Rng img_rng(derive_seed(spec.seed, 2));
    ds.images.resize(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        ds.images[c].reserve(spec.images_per_class);
        for (std::size_t i = 0; i < spec.images_per_class; ++i) {
            std::vector<double> flat(spec.patches * spec.d_in);
            for (std::size_t p = 0; p < spec.patches; ++p) {
                for (std::size_t j = 0; j < spec.d_in; ++j) {
                    double v;
                    if (p < spec.k_disc) {
                        v = spec.signal_scale * protos[c][j] +
                            spec.noise_scale * img_rng.normal();
                    } else {
                        v = spec.shift * dir[j] + img_rng.normal();
                    }
                    flat[p * spec.d_in + j] = v;
                }
            }
            ds.images[c].push_back(
                Tensor::from_data({spec.patches, spec.d_in}, flat));
        }
    }

    Rng prompt_rng(derive_seed(spec.seed, 3));
    const std::size_t filler_lo = 1 + spec.num_classes * spec.signature_tokens;
    ds.prompts.resize(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        ds.prompts[c].reserve(spec.prompts_per_class);
        for (std::size_t i = 0; i < spec.prompts_per_class; ++i) {
            // Choose distinct slots for the signature tokens, keep the
            // signature in id order at ascending slots.
            std::vector<std::size_t> slots(spec.prompt_len);
            for (std::size_t s = 0; s < spec.prompt_len; ++s) slots[s] = s;
            for (std::size_t s = 0; s < spec.signature_tokens; ++s) {
                std::size_t pick = s + prompt_rng.index(spec.prompt_len - s);
                std::swap(slots[s], slots[pick]);
            }
            std::vector<std::size_t> chosen(slots.begin(),
                                            slots.begin() +
                                                spec.signature_tokens);
            std::sort(chosen.begin(), chosen.end());

            std::vector<std::size_t> seq(spec.prompt_len, 0);
            std::vector<bool> is_sig(spec.prompt_len, false);
            for (std::size_t s = 0; s < spec.signature_tokens; ++s) {
                seq[chosen[s]] = 1 + c * spec.signature_tokens + s;
                is_sig[chosen[s]] = true;
            }
            for (std::size_t s = 0; s < spec.prompt_len; ++s) {
                if (!is_sig[s])
                    seq[s] = filler_lo + prompt_rng.index(spec.vocab - filler_lo);
            }
            seq.push_back(kEosId);
            ds.prompts[c].push_back(std::move(seq));
        }
    }
    return ds;
}

void save_dataset(const SynthDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("dataset archive " + path +
                                 ": cannot open for writing");
    }
    out << "semprobe-dataset v1\n" << spec_text(ds.spec);
    out << "prototypes";
    for (std::size_t i = 0; i < ds.prototypes.size(); ++i)
        out << ' ' << fmt17(ds.prototypes.at(i));
    out << "\nshift_direction";
    for (std::size_t i = 0; i < ds.shift_direction.size(); ++i)
        out << ' ' << fmt17(ds.shift_direction.at(i));
    out << '\n';
    for (std::size_t c = 0; c < ds.images.size(); ++c) {
        for (std::size_t i = 0; i < ds.images[c].size(); ++i) {
            out << "image " << c << ' ' << i;
            const Tensor& img = ds.images[c][i];
            for (std::size_t j = 0; j < img.size(); ++j)
                out << ' ' << fmt17(img.at(j));
            out << '\n';
        }
    }
    for (std::size_t c = 0; c < ds.prompts.size(); ++c) {
        for (std::size_t i = 0; i < ds.prompts[c].size(); ++i) {
            out << "prompt " << c << ' ' << i << ' '
                << ds.prompts[c][i].size();
            for (std::size_t id : ds.prompts[c][i]) out << ' ' << id;
            out << '\n';
        }
    }
    if (!out) {
        throw std::runtime_error("dataset archive " + path + ": write failed");
    }
}

SynthDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("dataset archive " + path +
                                 ": cannot open for reading");
    }
    expect_word(in, "semprobe-dataset", path);
    expect_word(in, "v1", path);

    SynthDomainSpec spec;
    auto read_size = [&](const char* name, std::size_t& slot) {
        expect_word(in, name, path);
        if (!(in >> slot)) {
            throw std::runtime_error("dataset archive " + path +
                                     ": bad value for " + name);
        }
    };
    auto read_double = [&](const char* name, double& slot) {
        expect_word(in, name, path);
        if (!(in >> slot)) {
            throw std::runtime_error("dataset archive " + path +
                                     ": bad value for " + name);
        }
    };
    read_size("num_classes", spec.num_classes);
    read_size("d_in", spec.d_in);
    read_size("patches", spec.patches);
    read_size("k_disc", spec.k_disc);
    read_double("signal_scale", spec.signal_scale);
    read_double("noise_scale", spec.noise_scale);
    read_double("shift", spec.shift);
    read_size("images_per_class", spec.images_per_class);
    read_size("prompts_per_class", spec.prompts_per_class);
    read_size("vocab", spec.vocab);
    read_size("prompt_len", spec.prompt_len);
    read_size("signature_tokens", spec.signature_tokens);
    expect_word(in, "seed", path);
    if (!(in >> spec.seed)) {
        throw std::runtime_error("dataset archive " + path +
                                 ": bad value for seed");
    }
    spec.validate();

    SynthDataset ds;
    ds.spec = spec;

    expect_word(in, "prototypes", path);
    std::vector<double> proto_flat(spec.num_classes * spec.d_in);
    for (double& v : proto_flat) {
        if (!(in >> v)) {
            throw std::runtime_error("dataset archive " + path +
                                     ": truncated prototypes");
        }
    }
    ds.prototypes =
        Tensor::from_data({spec.num_classes, spec.d_in}, proto_flat);

    expect_word(in, "shift_direction", path);
    std::vector<double> dir(spec.d_in);
    for (double& v : dir) {
        if (!(in >> v)) {
            throw std::runtime_error("dataset archive " + path +
                                     ": truncated shift_direction");
        }
    }
    ds.shift_direction = Tensor::from_data({spec.d_in}, dir);

    ds.images.assign(spec.num_classes, {});
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < spec.images_per_class; ++i) {
            expect_word(in, "image", path);
            std::size_t gc = 0, gi = 0;
            if (!(in >> gc >> gi) || gc != c || gi != i) {
                throw std::runtime_error("dataset archive " + path +
                                         ": images out of order");
            }
            std::vector<double> flat(spec.patches * spec.d_in);
            for (double& v : flat) {
                if (!(in >> v)) {
                    throw std::runtime_error("dataset archive " + path +
                                             ": truncated image");
                }
            }
            ds.images[c].push_back(
                Tensor::from_data({spec.patches, spec.d_in}, flat));
        }
    }

    ds.prompts.assign(spec.num_classes, {});
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < spec.prompts_per_class; ++i) {
            expect_word(in, "prompt", path);
            std::size_t gc = 0, gi = 0, len = 0;
            if (!(in >> gc >> gi >> len) || gc != c || gi != i) {
                throw std::runtime_error("dataset archive " + path +
                                         ": prompts out of order");
            }
            std::vector<std::size_t> seq(len);
            for (std::size_t& id : seq) {
                if (!(in >> id) || id >= spec.vocab) {
                    throw std::runtime_error("dataset archive " + path +
                                             ": bad prompt token");
                }
            }
            ds.prompts[c].push_back(std::move(seq));
        }
    }
    return ds;
}

std::string dataset_key(const SynthDomainSpec& spec) {
    spec.validate();
    const std::string text = spec_text(spec);
    std::uint64_t h = 1469598103934665603ull; // FNV-1a
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

DualEncoder induce_collapse(const DualEncoder& m, const CollapseInit& init) {
    if (!std::isfinite(init.bias) || init.bias < 0.0) {
        throw std::runtime_error(
            "induce_collapse: bias must be finite and >= 0");
    }
    DualEncoder out = m;
    if (init.bias == 0.0) return out; // documented no-op
    for (TransformerLayer& layer : out.vision.layers)
        layer.attn.cls_self_bias = init.bias;

    // The claimed failure mode must actually hold on this architecture:
    // average the CLS self-weight across layers over random inputs.
    Rng rng(0x636f6c6c61ull);
    double total = 0.0;
    std::size_t count = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor img = Tensor::randn({out.cfg.patches, out.cfg.d_in}, rng);
        VisionOut vo = vision_forward(out, img);
        for (const LayerTrace& t : vo.traces) {
            total += t.cls_row.at(0);
            ++count;
        }
    }
    double mean_self = total / static_cast<double>(count);
    if (mean_self <= 0.9) {
        throw std::runtime_error(
            "induce_collapse: bias " + fmt17(init.bias) +
            " does not collapse attention (mean CLS self-weight " +
            fmt17(mean_self) + ")");
    }
    return out;
}

} // namespace semprobe
