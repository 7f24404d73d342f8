//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//
// Command line front end: sweep, punch, natcheck, trace.
// Exit codes: 0 success, 1 usage/input error, 2 punch failed, 3 inconclusive.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "holepunch/natcheck.hpp"
#include "holepunch/puncher.hpp"
#include "holepunch/rendezvous.hpp"
#include "holepunch/report.hpp"
#include "holepunch/scenario.hpp"

using namespace holepunch;

namespace {

constexpr uint16_t observer_port = 1235;

struct PunchRun {
    std::optional<PunchOutcome> outcome;
    std::string trace;
};

PunchRun run_punch(const std::string& scenario_path, uint64_t seed, const std::string& transport,
                   bool sequential, bool predict) {
    std::vector<scenario::ScriptAction> script;
    auto w = scenario::load_file(scenario_path, seed, &script);
    if (w->roles.server.empty() || w->roles.peers.size() < 2)
        throw std::runtime_error("scenario needs a server host and two peer hosts");
    scenario::schedule_script(*w, script);

    sim::Host& server_host = w->net.host(w->roles.server);
    RendezvousServer server(w->net, server_host);
    server.add_udp_observer(observer_port);

    const std::string& a = w->roles.peers[0];
    const std::string& b = w->roles.peers[1];
    PunchClient ca(w->net, w->net.host(a), a, server.udp_endpoint(), server.tcp_endpoint());
    PunchClient cb(w->net, w->net.host(b), b, server.udp_endpoint(), server.tcp_endpoint());

    PunchRun run;
    ca.on_result = [&](const PeerId&, const PunchOutcome& o) { run.outcome = o; };

    if (transport == "udp") {
        ca.register_udp(w->peer_ports.at(a));
        cb.register_udp(w->peer_ports.at(b));
    } else {
        ca.register_tcp(w->peer_ports.at(a));
        cb.register_tcp(w->peer_ports.at(b));
    }
    w->net.run_until(w->net.now() + sim::operator""_s(1ull));

    if (transport == "udp") {
        if (predict)
            ca.punch_udp_predictive(b, observer_port);
        else
            ca.punch_udp(b);
    } else {
        ca.punch_tcp(b, sequential);
    }
    w->net.run_until(w->net.now() + sim::operator""_s(60ull));
    run.trace = w->net.trace().str();
    return run;
}

int cmd_punch(const std::string& scenario_path, uint64_t seed, const std::string& transport,
              bool sequential, bool predict, bool dump_trace) {
    PunchRun run = run_punch(scenario_path, seed, transport, sequential, predict);
    if (dump_trace) std::cout << run.trace;
    if (!run.outcome) {
        std::cerr << "punch: no result before deadline\n";
        return 3;
    }
    const PunchOutcome& o = *run.outcome;
    if (!dump_trace) {
        std::cout << (o.success ? "punched" : "failed") << " transport=" << transport
                  << " path=" << to_string(o.path);
        if (o.success) std::cout << " remote=" << format(o.remote);
        std::cout << " elapsed_ms=" << o.elapsed / sim::operator""_ms(1ull)
                  << " retries=" << o.retries_used;
        if (!o.detail.empty()) std::cout << " detail=" << o.detail;
        std::cout << "\n";
    }
    return o.success ? 0 : 2;
}

int cmd_natcheck(const std::string& scenario_path, uint64_t seed) {
    auto w = scenario::load_file(scenario_path, seed);
    if (w->roles.client.empty() || w->roles.probe_servers.size() < 3)
        throw std::runtime_error("scenario needs a client host and three probe_server hosts");
    NatProfile profile = NatCheck(*w).run();
    Verdict v = classify(profile);

    nlohmann::ordered_json out;
    out["profile"] = to_json(profile);
    auto put = [&](const char* key, const std::optional<bool>& val) {
        if (val) out["verdict"][key] = *val;
        else out["verdict"][key] = nullptr;
    };
    put("udp_punch", v.udp_punch);
    put("udp_hairpin", v.udp_hairpin);
    put("tcp_punch_strict", v.tcp_punch_strict);
    put("tcp_punch_lenient", v.tcp_punch_lenient);
    put("tcp_hairpin", v.tcp_hairpin);
    std::cout << out.dump(2) << "\n";

    bool conclusive = profile.udp_consistent.has_value() && profile.tcp_consistent.has_value();
    return conclusive ? 0 : 3;
}

int cmd_sweep(const std::string& fleet_path, const std::string& out_path, uint64_t seed) {
    std::ifstream in(fleet_path);
    if (!in) throw std::runtime_error("cannot open fleet file: " + fleet_path);
    report::FleetSpec fleet = report::fleet_from_json(nlohmann::json::parse(in));

    auto rows = report::aggregate(report::sweep(fleet, seed));
    std::string table = report::render_table(rows);

    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write report: " + out_path);
    out << table;
    std::ofstream machine(out_path + ".json");
    machine << report::rows_to_json(rows).dump(2) << "\n";

    std::cout << table;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"NAT traversal toolkit: hole punching and NAT behavior probing "
                 "over a deterministic network simulator"};
    app.require_subcommand(1);
    app.fallthrough();  // lets --seed appear after the subcommand name

    uint64_t seed = 1;
    app.add_option("--seed", seed, "simulation seed")->capture_default_str();

    std::string scenario_path, fleet_path, out_path, transport = "udp";
    bool sequential = false, predict = false;

    CLI::App* punch = app.add_subcommand("punch", "run a hole punching scenario");
    punch->add_option("--scenario", scenario_path, "scenario file")->required();
    punch->add_option("--transport", transport, "udp or tcp")
        ->check(CLI::IsMember({"udp", "tcp"}));
    punch->add_flag("--sequential", sequential, "sequential TCP punching (connect, then accept)");
    punch->add_flag("--predict", predict, "UDP port prediction for symmetric NATs");

    CLI::App* natcheck = app.add_subcommand("natcheck", "probe the NAT in a scenario");
    natcheck->add_option("--scenario", scenario_path, "scenario file")->required();

    CLI::App* trace = app.add_subcommand("trace", "run a punch scenario and emit the packet trace");
    trace->add_option("--scenario", scenario_path, "scenario file")->required();
    trace->add_option("--transport", transport, "udp or tcp")
        ->check(CLI::IsMember({"udp", "tcp"}));
    trace->add_flag("--sequential", sequential, "sequential TCP punching");
    trace->add_flag("--predict", predict, "UDP port prediction");

    CLI::App* sweep = app.add_subcommand("sweep", "probe a fleet of NATs and render the report");
    sweep->add_option("--fleet", fleet_path, "fleet file")->required();
    sweep->add_option("--out", out_path, "report output path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (punch->parsed()) return cmd_punch(scenario_path, seed, transport, sequential, predict, false);
        if (trace->parsed()) return cmd_punch(scenario_path, seed, transport, sequential, predict, true);
        if (natcheck->parsed()) return cmd_natcheck(scenario_path, seed);
        if (sweep->parsed()) return cmd_sweep(fleet_path, out_path, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
