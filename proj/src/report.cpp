#include "kvrelay/report.hpp"

#include <array>
#include <charconv>
#include <sstream>

#include "json.hpp"

namespace kvrelay {

using ordered_json = nlohmann::ordered_json;

std::string format_real(double x) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), x);
    return std::string(buf.data(), end);
}

namespace {

ordered_json trace_to_json(const ObfUnitTrace& u, bool verbose) {
    ordered_json doc;
    doc["layer"] = u.layer;
    doc["kv_head"] = u.kv_head;
    doc["skipped"] = u.skipped;
    doc["skip_reason"] = std::string(to_string(u.skip_reason));
    doc["basis_rank"] = u.basis_rank;
    doc["residual_norm"] = u.residual_norm;
    doc["principal_rank"] = u.principal_rank;
    doc["demand_keep"] = u.demand.keep;
    doc["demand_del"] = u.demand.del;
    doc["demand_ratio"] = u.demand_ratio;
    doc["keep_demand_vanished"] = u.keep_demand_vanished;
    doc["delta_norm"] = norm2(u.scaled);
    if (verbose) {
        doc["weights"] = u.weights;
        doc["summary"] = u.summary;
        doc["injection"] = u.injection;
        doc["delta"] = u.scaled;
    }
    return doc;
}

}  // namespace

std::string report_to_json(const RelayReport& report, std::size_t episode, bool verbose) {
    ordered_json doc;
    doc["method"] = report.method;
    doc["episode"] = episode;
    ordered_json rounds = ordered_json::array();
    for (std::size_t i = 0; i < report.rounds.size(); ++i) {
        const auto& r = report.rounds[i];
        ordered_json row;
        row["round"] = r.round;
        row["prompt_len"] = r.prompt_len;
        row["kept_prompt"] = r.kept_prompt;
        row["gen_len"] = r.gen_len;
        row["message_len"] = r.message_len;
        row["rho_achieved"] = r.rho_achieved;
        row["r_eff"] = r.r_eff;
        row["obf_units"] = r.obf_units;
        row["obf_skipped"] = r.obf_skipped;
        if (verbose && i < report.traces.size()) {
            ordered_json units = ordered_json::array();
            for (const auto& u : report.traces[i].units) units.push_back(trace_to_json(u, true));
            row["obf_trace"] = std::move(units);
        }
        rounds.push_back(std::move(row));
    }
    doc["rounds"] = std::move(rounds);

    const auto& t = report.totals;
    ordered_json totals;
    totals["total_prompt_len"] = t.total_prompt_len;
    totals["relayed_prompt_tokens"] = t.relayed_prompt_tokens;
    totals["sink_len"] = t.sink_len;
    totals["final_message_len"] = t.final_message_len;
    totals["total_states"] = t.total_states;
    totals["rho_achieved"] = t.rho_achieved;
    totals["rho_all_states"] = t.rho_all_states;
    totals["r_eff"] = t.r_eff;
    doc["totals"] = std::move(totals);

    ordered_json obf;
    obf["units"] = report.obf.units;
    obf["skipped"] = report.obf.skipped;
    obf["skip_rate"] = report.obf.skip_rate;
    obf["mean_delta_norm"] = report.obf.mean_delta_norm;
    obf["max_demand_ratio"] = report.obf.max_demand_ratio;
    doc["obf"] = std::move(obf);
    return doc.dump(2) + "\n";
}

std::string report_to_csv(const RelayReport& report) {
    std::ostringstream out;
    out << "round,prompt_len,kept_prompt,gen_len,message_len,rho_achieved,r_eff\n";
    for (const auto& r : report.rounds) {
        out << r.round << ',' << r.prompt_len << ',' << r.kept_prompt << ',' << r.gen_len << ','
            << r.message_len << ',' << format_real(r.rho_achieved) << ',' << format_real(r.r_eff) << '\n';
    }
    const auto& t = report.totals;
    std::size_t gen_total = 0;
    for (const auto& r : report.rounds) gen_total += r.gen_len;
    out << "total," << t.total_prompt_len << ',' << t.relayed_prompt_tokens << ',' << gen_total << ','
        << t.final_message_len << ',' << format_real(t.rho_achieved) << ',' << format_real(t.r_eff) << '\n';
    return out.str();
}

}  // namespace kvrelay
