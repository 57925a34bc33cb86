// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Reference values come from the oracles in tests/oracles.hpp, not
// from the library's own numerics.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kvrelay/compressors.hpp"
#include "kvrelay/relay.hpp"
#include "kvrelay/simulate.hpp"
#include "kvrelay/synthetic.hpp"
#include "oracles.hpp"

using namespace kvrelay;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Records the first failure message; later checks still run.
class Checker {
public:
    void require(bool ok, const std::string& what) {
        ++checks_;
        if (!ok && pass_) {
            pass_ = false;
            first_failure_ = what;
        }
        if (!ok) ++failures_;
    }
    Outcome outcome(const std::string& summary) const {
        if (pass_) return {true, summary + ", " + std::to_string(checks_) + " checks"};
        return {false, first_failure_ + " (" + std::to_string(failures_) + " of " + std::to_string(checks_) +
                           " checks failed)"};
    }

private:
    bool pass_ = true;
    std::size_t checks_ = 0;
    std::size_t failures_ = 0;
    std::string first_failure_;
};

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

const std::vector<std::string> kMethods{"full",          "streaming",        "h2o_global",
                                        "h2o_layerwise", "h2o_headwise",     "h2o_obf_global",
                                        "h2o_obf_layerwise", "h2o_obf_headwise"};

ChainConfig chain_for(const std::string& method, std::size_t latent_steps = 40) {
    ChainConfig c;
    const auto spec = parse_method_name(method);
    c.compression.method = spec.method;
    c.compression.granularity = spec.granularity;
    c.latent_steps = latent_steps;
    return c;
}

// Random but valid episode shapes, small enough for hundreds of chains.
EpisodeSpec random_spec(std::mt19937_64& rng, std::uint64_t seed) {
    std::uniform_int_distribution<std::size_t> prompt(8, 72), pad(0, 4), dim(4, 20), small(1, 3);
    EpisodeSpec s;
    s.seed = seed;
    s.num_layers = small(rng);
    s.num_kv_heads = small(rng);
    s.kv_group_size = small(rng);
    s.key_dim = dim(rng);
    s.value_dim = dim(rng);
    s.gen_len = 40;
    s.prompt_lens = {prompt(rng), prompt(rng), prompt(rng)};
    if (rng() % 2 == 0) s.pad_lens = {pad(rng), pad(rng), pad(rng)};
    const auto structure = rng() % 3;
    s.value_structure = structure == 0 ? ValueStructure::Gaussian
                        : structure == 1 ? ValueStructure::LowRank
                                         : ValueStructure::PlantedInSpan;
    s.structure_rank = small(rng);
    return s;
}

std::vector<EpisodeSpec> random_specs(std::size_t n) {
    std::mt19937_64 rng(20240601);
    std::vector<EpisodeSpec> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(random_spec(rng, 1000 + i));
    return out;
}

bool bit_equal_rows(const Matrix& a, std::size_t ra, const Matrix& b, std::size_t rb) {
    if (a.cols() != b.cols()) return false;
    auto x = a.row(ra);
    auto y = b.row(rb);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(x[i]) != std::bit_cast<std::uint64_t>(y[i])) return false;
    }
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// Attention mass per (layer, query head), summed directly from the weights.
std::vector<std::vector<double>> oracle_query_head_mass(const AttentionRecord& attn, const IndexList& gen) {
    std::vector<std::vector<double>> out;
    for (std::size_t l = 0; l < attn.num_layers(); ++l) {
        for (std::size_t q = 0; q < attn.num_query_heads(); ++q) {
            const Matrix& w = attn.weights(l, q);
            std::vector<double> mass(w.cols(), 0.0);
            for (Position t : gen) {
                const auto r = *attn.query_positions().find(t);
                for (std::size_t j = 0; j < w.cols(); ++j) mass[j] += w(r, j);
            }
            out.push_back(std::move(mass));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

Outcome criterion_ratio_table() {
    const std::pair<std::size_t, double> table[] = {{524, 18.3}, {663, 14.5}, {819, 11.7}, {942, 10.2}, {496, 19.4},
                                                     {524, 18.3}, {778, 12.3}, {828, 11.6}, {888, 10.8}};
    Checker c;
    for (const auto& [len, rho] : table) {
        const double got = compression_ratio(len, 32, 3);
        c.require(std::llround(got * 10.0) == std::llround(rho * 10.0),
                  "L=" + std::to_string(len) + " gave " + fmt(got) + ", expected " + fmt(rho));
    }
    return c.outcome("nine benchmark rows reproduced");
}

Outcome criterion_orthogonality() {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> kn(1, 16), dd(1, 32);
    Checker c;
    double worst_rq = 0.0, worst_qq = 0.0;
    const std::size_t pairs = 1500;
    for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t k = kn(rng), n = kn(rng), d = dd(rng);
        // Every fourth keep matrix is rank deficient.
        const Matrix keep = i % 4 == 3 ? oracle::random_low_rank(rng, k, d, 1 + rng() % std::min(k, d))
                                       : oracle::random_matrix(rng, k, d);
        const Matrix del = oracle::random_matrix(rng, n, d);
        const auto split = obf_residual(keep, del);
        const Eigen::MatrixXd q = oracle::to_eigen(split.basis.basis);
        const double rq = (oracle::to_eigen(split.residual) * q).norm() / (1.0 + frobenius_norm(del));
        const double qq = (q.transpose() * q - Eigen::MatrixXd::Identity(q.cols(), q.cols())).norm();
        worst_rq = std::max(worst_rq, rq);
        worst_qq = std::max(worst_qq, qq);
        c.require(rq <= 1e-8, "pair " + std::to_string(i) + ": |RQ|/(1+|V_del|) = " + fmt(rq));
        c.require(qq <= 1e-10, "pair " + std::to_string(i) + ": |QtQ - I| = " + fmt(qq));
    }
    return c.outcome(std::to_string(pairs) + " pairs, worst |RQ| " + fmt(worst_rq) + ", worst |QtQ-I| " + fmt(worst_qq));
}

Outcome criterion_svd_oracle() {
    std::mt19937_64 rng(202);
    Checker c;
    std::size_t matrices = 0;
    double worst_sigma = 0.0;
    for (std::size_t n = 1; n <= 6; ++n) {
        for (std::size_t d = 1; d <= 6; ++d) {
            for (int trial = 0; trial < 40; ++trial) {
                const std::size_t full = std::min(n, d);
                const std::size_t rank = trial % 4 == 3 ? 1 + rng() % full : full;
                const Matrix m = rank == full ? oracle::random_matrix(rng, n, d) : oracle::random_low_rank(rng, n, d, rank);
                const auto sub = principal_subspace(m, 6);
                const auto ref = oracle::gram_spectrum(m);
                ++matrices;
                const std::string tag = std::to_string(n) + "x" + std::to_string(d) + " #" + std::to_string(trial);
                c.require(sub.rank() == rank, tag + ": rank " + std::to_string(sub.rank()) + " vs " + std::to_string(rank));
                const std::size_t p = std::min(sub.rank(), rank);
                const double top = ref.singular_values[0];
                for (std::size_t k = 0; k < p; ++k) {
                    const double err = std::abs(sub.singular_values[k] - ref.singular_values[k]);
                    worst_sigma = std::max(worst_sigma, err);
                    c.require(err <= 1e-8, tag + ": sigma_" + std::to_string(k) + " off by " + fmt(err));
                    if (k + 1 < p) c.require(sub.singular_values[k] >= sub.singular_values[k + 1], tag + ": order");
                    // Individual vectors are only determined when σ_k is isolated.
                    double gap = std::abs(ref.singular_values[k] - (k + 1 < d ? ref.singular_values[k + 1] : 0.0));
                    if (k > 0) gap = std::min(gap, std::abs(ref.singular_values[k - 1] - ref.singular_values[k]));
                    if (gap > 1e-4 * top) {
                        const double dist =
                            oracle::sign_free_distance(oracle::to_eigen(sub.rows.row(k)), ref.vectors.col(k));
                        c.require(dist <= 1e-6, tag + ": vector " + std::to_string(k) + " off by " + fmt(dist));
                    }
                }
                // Whole retained subspace: projectors agree.
                if (p > 0 && (p == d || ref.singular_values[p - 1] - ref.singular_values[p] > 1e-4 * top)) {
                    const Eigen::MatrixXd cr = oracle::to_eigen(sub.rows).topRows(p);
                    const Eigen::MatrixXd vr = ref.vectors.leftCols(p);
                    const double perr = (cr.transpose() * cr - vr * vr.transpose()).norm();
                    c.require(perr <= 1e-6, tag + ": subspace projector off by " + fmt(perr));
                }
            }
        }
    }
    return c.outcome(std::to_string(matrices) + " matrices up to 6x6, worst sigma error " + fmt(worst_sigma));
}

Outcome criterion_top_k() {
    std::mt19937_64 rng(303);
    Checker c;
    const std::size_t maps = 2000;
    std::size_t tie_pairs = 0;
    for (std::size_t i = 0; i < maps; ++i) {
        const std::size_t n = 1 + rng() % 64;
        const int levels = 1 + static_cast<int>(rng() % 6);  // few levels, many ties
        std::vector<Position> pos;
        std::vector<double> mass;
        Position p = static_cast<Position>(rng() % 10);
        for (std::size_t j = 0; j < n; ++j) {
            pos.push_back(p);
            mass.push_back(static_cast<double>(rng() % levels) * 0.125);
            p += 1 + static_cast<Position>(rng() % 5);
        }
        const IndexList omega(pos);
        const std::size_t k = rng() % (n + 3);
        const MassTable table{Granularity::Global, 1, 1, omega, {mass}};
        const auto sel = h2o_select(table, omega, k);
        const auto expected = oracle::sort_top_k(table.scores(0), k, omega);
        c.require(sel.keep == expected, "map " + std::to_string(i) + ": selection differs from sort oracle");
        c.require(sel.deleted == set_difference(omega, expected), "map " + std::to_string(i) + ": deleted set");
        for (Position kept : sel.keep) {
            for (Position gone : sel.deleted) {
                if (table.at(0, kept) == table.at(0, gone)) {
                    ++tie_pairs;
                    c.require(kept < gone, "map " + std::to_string(i) + ": tie kept the higher position");
                }
            }
        }
    }
    return c.outcome(std::to_string(maps) + " score maps, " + std::to_string(tie_pairs) + " kept/deleted ties");
}

Outcome criterion_obf_closed_form() {
    Checker c;
    double worst = 0.0;
    std::size_t units_checked = 0;
    const double eps = 1e-12;
    // |Ω_i| = 33 every round with k = 32, so exactly one prompt row is deleted.
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        EpisodeSpec spec;
        spec.seed = 500 + seed;
        spec.prompt_lens = {37, 33, 33};
        spec.pad_lens = seed % 2 == 0 ? std::vector<std::size_t>{} : std::vector<std::size_t>{2, 0, 3};
        const SyntheticEpisode ep(spec);
        for (const char* method : {"h2o_obf_global", "h2o_obf_layerwise", "h2o_obf_headwise"}) {
            const auto res = run_chain(ep, chain_for(method));
            const auto& msg = res.message.cache();
            for (int round = 1; round <= 3; ++round) {
                const auto in = ep.round(round);
                const auto& record = res.message.rounds()[round - 1];
                const IndexList content = set_difference(in.prompt, in.padding);
                const IndexList omega = round == 1 ? set_difference(content, take_front(content, 4)) : content;
                const IndexList& keep = record.retained_prompt;
                const IndexList del = set_difference(omega, keep);
                c.require(del.size() == 1, "expected one deleted row, got " + std::to_string(del.size()));
                if (del.size() != 1) continue;

                const auto qmass = oracle_query_head_mass(in.attention, in.generation);
                const auto& cols = in.attention.key_positions();
                const std::size_t group = spec.kv_group_size;
                for (std::size_t l = 0; l < spec.num_layers; ++l) {
                    for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
                        const auto head_mass = [&](Position pos) {
                            double s = 0.0;
                            for (std::size_t g = 0; g < group; ++g)
                                s += qmass[l * spec.num_kv_heads * group + h * group + g][*cols.find(pos)];
                            return s;
                        };
                        double a_keep = 0.0;
                        for (Position pos : keep) a_keep += head_mass(pos);
                        const double a_del = head_mass(del[0]);

                        const Matrix& v = in.local.values(l, h);
                        const Matrix v_keep = select(in.local, keep).values(l, h);
                        const Matrix v_del = select(in.local, del).values(l, h);
                        // p = 1 and C spans R[1,:], so proj_C(R[1,:]) = R[1,:].
                        const Eigen::RowVectorXd r1 = oracle::ls_residual(v_keep, v_del).row(0);
                        const Eigen::RowVectorXd delta = (a_del / (a_keep + eps)) * r1;

                        const auto& mv = msg.values(l, h);
                        for (Position pos : keep) {
                            const auto src = *in.local.positions().find(pos);
                            const auto dst = *msg.positions().find(pos);
                            for (std::size_t i = 0; i < v.cols(); ++i) {
                                const double shift = mv(dst, i) - v(src, i);
                                const double err = std::abs(shift - delta(static_cast<Eigen::Index>(i)));
                                worst = std::max(worst, err);
                                c.require(err <= 1e-10, std::string(method) + " round " + std::to_string(round) +
                                                             ": delta off by " + fmt(err));
                            }
                        }
                        ++units_checked;
                    }
                }
            }
        }
    }

    // Planted-in-span values: every unit takes the skip path and the output
    // equals plain h2o bit for bit.
    std::size_t skipped = 0;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        EpisodeSpec spec;
        spec.seed = 900 + seed;
        spec.value_structure = ValueStructure::PlantedInSpan;
        spec.structure_rank = 1 + seed % 4;
        const SyntheticEpisode ep(spec);
        for (const char* g : {"global", "layerwise", "headwise"}) {
            const auto plain = run_chain(ep, chain_for(std::string("h2o_") + g));
            const auto obf = run_chain(ep, chain_for(std::string("h2o_obf_") + g));
            c.require(plain.message.cache() == obf.message.cache(),
                      std::string("planted_in_span ") + g + ": values differ from h2o");
            for (const auto& trace : obf.report.traces) {
                for (const auto& u : trace.units) {
                    ++skipped;
                    c.require(u.skipped && u.skip_reason == SkipReason::NegligibleResidual,
                              "planted_in_span unit not skipped for a negligible residual");
                }
            }
        }
    }
    return c.outcome(std::to_string(units_checked) + " single-deletion units (worst " + fmt(worst) + "), " +
                     std::to_string(skipped) + " planted units skipped");
}

// Criteria 6, 7 and 10 share the same random episode batch.
struct BatchResult {
    Outcome keys;
    Outcome recursion;
    Outcome softmax;
};

BatchResult criteria_on_random_batch() {
    const auto specs = random_specs(120);
    Checker keys, recursion, softmax;
    std::size_t chains = 0;
    std::size_t heads = 0;
    double worst_mass = 0.0;
    for (std::size_t e = 0; e < specs.size(); ++e) {
        const SyntheticEpisode ep(specs[e]);
        std::vector<RoundInput> inputs;
        for (int r = 1; r <= 3; ++r) inputs.push_back(ep.round(r));

        for (const auto& in : inputs) {
            const auto qmass = oracle_query_head_mass(in.attention, in.generation);
            for (const auto& m : qmass) {
                double total = 0.0;
                for (double x : m) total += x;
                const double err = std::abs(total - static_cast<double>(in.generation.size()));
                worst_mass = std::max(worst_mass, err);
                softmax.require(err <= 1e-5, "episode " + std::to_string(e) + ": query head mass off by " + fmt(err));
                ++heads;
            }
            // The library's per-KV-head table sums whole groups.
            const auto table = attention_mass_headwise(in.attention, in.generation, in.attention.key_positions());
            for (const auto& unit : table.masses) {
                double total = 0.0;
                for (double x : unit) total += x;
                const double expected = static_cast<double>(in.generation.size() * specs[e].kv_group_size);
                softmax.require(std::abs(total - expected) <= 1e-5, "episode " + std::to_string(e) + ": kv head mass");
            }
        }

        for (const auto& method : kMethods) {
            const auto res = run_chain(ep, chain_for(method));
            ++chains;
            const auto& msg = res.message.cache();
            const std::string tag = method + " episode " + std::to_string(e);

            // 6: every relayed key row is a bitwise copy of the source row.
            for (std::size_t t = 0; t < msg.length(); ++t) {
                const Position pos = msg.positions()[t];
                const RoundInput* owner = nullptr;
                for (const auto& in : inputs)
                    if (in.local.positions().contains(pos)) owner = &in;
                keys.require(owner != nullptr, tag + ": relayed position with no source");
                if (!owner) continue;
                const auto src = *owner->local.positions().find(pos);
                for (std::size_t l = 0; l < msg.shape().num_layers; ++l)
                    for (std::size_t h = 0; h < msg.shape().num_kv_heads; ++h)
                        keys.require(bit_equal_rows(msg.keys(l, h), t, owner->local.keys(l, h), src),
                                     tag + ": key row differs at position " + std::to_string(pos));
            }

            // 7: length recursion from the message contents and the report.
            std::size_t prev = 0;
            for (int r = 1; r <= 3; ++r) {
                const auto& in = inputs[r - 1];
                const auto& row = res.report.rounds[r - 1];
                const std::size_t from_round = set_intersection(msg.positions(), in.local.positions()).size();
                const std::size_t sink = r == 1 ? 4 : 0;
                recursion.require(from_round == sink + row.kept_prompt + row.gen_len, tag + ": block size");
                recursion.require(row.message_len == prev + sink + row.kept_prompt + row.gen_len,
                                  tag + ": report recursion at round " + std::to_string(r));
                recursion.require(row.gen_len == 40, tag + ": generation length");
                prev += from_round;
            }
            recursion.require(prev == msg.length(), tag + ": final length");
            const auto& sink = res.message.sink();
            recursion.require(sink.size() == 4, tag + ": sink size");
            std::size_t sink_hits = 0;
            for (Position pos : msg.positions()) sink_hits += sink.contains(pos) ? 1 : 0;
            recursion.require(sink_hits == sink.size(), tag + ": sink repeated");
            recursion.require(disjoint(sink, set_union(inputs[1].local.positions(), inputs[2].local.positions())),
                              tag + ": sink outside round 1");
        }
    }

    const SyntheticEpisode reference(EpisodeSpec{});
    const auto streaming = run_chain(reference, chain_for("streaming"));
    recursion.require(streaming.message.length() == 124,
                      "streaming |M_3| = " + std::to_string(streaming.message.length()) + ", expected 124");

    return {keys.outcome(std::to_string(specs.size()) + " episodes x 8 methods (" + std::to_string(chains) + " chains)"),
            recursion.outcome(std::to_string(chains) + " chains, streaming |M_3| = " +
                              std::to_string(streaming.message.length())),
            softmax.outcome(std::to_string(heads) + " (layer, head, round) sums, worst " + fmt(worst_mass))};
}

Outcome criterion_r_eff() {
    Checker c;
    const std::vector<std::size_t> two{16, 64}, one{16};
    c.require(effective_retention_ratio(two, 32) == 0.75, "r_eff(32, [16, 64]) != 0.75");
    c.require(effective_retention_ratio(one, 32) == 1.0, "saturation case != 1");
    c.require(effective_retention_ratio(two, 0) == 0.0, "k = 0 case != 0");
    return c.outcome("0.75 / 1.0 / 0.0");
}

Outcome criterion_determinism() {
    Checker c;
    const auto base = fs::temp_directory_path() / "kvrelay_acceptance_determinism";
    fs::remove_all(base);
    RunConfig cfg;
    cfg.chain.seed = 424242;
    cfg.episode_count = 3;
    cfg.episode.key_dim = 16;
    cfg.episode.value_dim = 16;
    cfg.verbosity = 1;
    cfg.emit_fixtures = true;
    cfg.output = base / "a";
    cfg.jobs = 4;
    run_simulation(cfg);
    cfg.output = base / "b";
    cfg.jobs = 1;
    run_simulation(cfg);
    std::size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(base / "a")) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), base / "a");
        ++files;
        c.require(fs::exists(base / "b" / rel) && slurp(entry.path()) == slurp(base / "b" / rel),
                  rel.string() + " differs between runs");
    }
    std::size_t files_b = 0;
    for (const auto& entry : fs::recursive_directory_iterator(base / "b")) files_b += entry.is_regular_file() ? 1 : 0;
    c.require(files == files_b, "runs wrote different file sets");
    fs::remove_all(base);
    return c.outcome(std::to_string(files) + " files byte-identical");
}

}  // namespace

int main() {
    struct Entry {
        int id;
        const char* name;
        double budget_s;  // 0: no runtime limit
        std::function<Outcome()> run;
    };
    BatchResult batch;
    bool batch_ready = false;
    const auto from_batch = [&](Outcome BatchResult::*field) {
        return [&, field] {
            if (!batch_ready) {
                batch = criteria_on_random_batch();
                batch_ready = true;
            }
            return batch.*field;
        };
    };
    const std::vector<Entry> entries = {
        {1, "compression ratio table", 1.0, criterion_ratio_table},
        {2, "residual orthogonality", 10.0, criterion_orthogonality},
        {3, "principal subspace vs Gram oracle", 10.0, criterion_svd_oracle},
        {4, "top-k vs sort oracle", 5.0, criterion_top_k},
        {5, "backfill closed form and skip path", 0.0, criterion_obf_closed_form},
        {6, "key immutability", 0.0, from_batch(&BatchResult::keys)},
        {7, "message recursion and single sink", 0.0, from_batch(&BatchResult::recursion)},
        {8, "effective retention ratio", 0.0, criterion_r_eff},
        {9, "byte-identical reruns", 0.0, criterion_determinism},
        {10, "softmax mass conservation", 0.0, from_batch(&BatchResult::softmax)},
    };

    int failed = 0;
    for (const auto& e : entries) {
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = e.run();
        } catch (const std::exception& ex) {
            out = {false, std::string("exception: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (e.budget_s > 0.0 && secs >= e.budget_s) {
            out.pass = false;
            out.detail += "; took " + fmt(secs) + " s, limit " + fmt(e.budget_s) + " s";
        }
        std::printf("criterion %2d %s: %s (%s; %.2f s)\n", e.id, out.pass ? "PASS" : "FAIL", e.name,
                    out.detail.c_str(), secs);
        std::fflush(stdout);
        if (!out.pass) ++failed;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(entries.size()) - failed, entries.size());
    return failed == 0 ? 0 : 1;
}
