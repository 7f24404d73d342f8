//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "holepunch/natbox.hpp"
#include "holepunch/sim/net.hpp"

namespace holepunch::scenario {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// NatConfig <-> JSON
// ---------------------------------------------------------------------------

inline std::string to_string(MappingPolicy p) {
    switch (p) {
    case MappingPolicy::endpoint_independent: return "endpoint_independent";
    case MappingPolicy::address_dependent: return "address_dependent";
    case MappingPolicy::address_port_dependent: return "address_port_dependent";
    }
    return "?";
}

inline MappingPolicy policy_from_string(const std::string& s) {
    if (s == "endpoint_independent") return MappingPolicy::endpoint_independent;
    if (s == "address_dependent") return MappingPolicy::address_dependent;
    if (s == "address_port_dependent") return MappingPolicy::address_port_dependent;
    throw std::invalid_argument("unknown policy: " + s);
}

inline std::string to_string(TcpUnsolicited t) {
    switch (t) {
    case TcpUnsolicited::drop: return "drop";
    case TcpUnsolicited::rst: return "rst";
    case TcpUnsolicited::allow: return "allow";
    }
    return "?";
}

inline TcpUnsolicited tcp_unsolicited_from_string(const std::string& s) {
    if (s == "drop") return TcpUnsolicited::drop;
    if (s == "rst") return TcpUnsolicited::rst;
    if (s == "allow") return TcpUnsolicited::allow;
    throw std::invalid_argument("unknown tcp_unsolicited: " + s);
}

inline json to_json(const PortAlloc& pa) {
    json j;
    switch (pa.kind) {
    case PortAlloc::Kind::preserve_then_sequential: j["kind"] = "preserve"; break;
    case PortAlloc::Kind::sequential:
        j["kind"] = "sequential";
        j["start"] = pa.start;
        j["stride"] = pa.stride;
        break;
    case PortAlloc::Kind::random:
        j["kind"] = "random";
        j["seed"] = pa.seed;
        break;
    }
    return j;
}

inline PortAlloc port_alloc_from_json(const json& j) {
    std::string kind = j.value("kind", "sequential");
    if (kind == "preserve") return PortAlloc::preserve();
    if (kind == "sequential")
        return PortAlloc::sequential(j.value("start", 62000), j.value("stride", 1));
    if (kind == "random") return PortAlloc::random(j.value("seed", uint64_t{0}));
    throw std::invalid_argument("unknown port_alloc kind: " + kind);
}

inline json to_json(const NatConfig& c) {
    json j;
    j["mapping"] = to_string(c.mapping);
    j["filtering"] = to_string(c.filtering);
    j["hairpin"] = c.hairpin;
    j["tcp_unsolicited"] = to_string(c.tcp_unsolicited);
    j["port_alloc"] = to_json(c.port_alloc);
    j["udp_idle_timeout_s"] = c.udp_idle_timeout / sim::operator""_s(1ull);
    j["payload_rewrite"] = c.payload_rewrite;
    j["hairpin_filter"] = c.hairpin_filter;
    j["pool_size"] = c.pool_size;
    return j;
}

inline NatConfig nat_config_from_json(const json& j) {
    NatConfig c;
    if (j.contains("mapping")) c.mapping = policy_from_string(j.at("mapping"));
    if (j.contains("filtering")) c.filtering = policy_from_string(j.at("filtering"));
    c.hairpin = j.value("hairpin", c.hairpin);
    if (j.contains("tcp_unsolicited"))
        c.tcp_unsolicited = tcp_unsolicited_from_string(j.at("tcp_unsolicited"));
    if (j.contains("port_alloc")) c.port_alloc = port_alloc_from_json(j.at("port_alloc"));
    if (j.contains("udp_idle_timeout_s"))
        c.udp_idle_timeout = sim::operator""_s(j.at("udp_idle_timeout_s").get<uint64_t>());
    c.payload_rewrite = j.value("payload_rewrite", c.payload_rewrite);
    c.hairpin_filter = j.value("hairpin_filter", c.hairpin_filter);
    c.pool_size = j.value("pool_size", c.pool_size);
    return c;
}

// ---------------------------------------------------------------------------
// Worlds
// ---------------------------------------------------------------------------

/// Role assignments within a built world, by host name. Which services get
/// attached to them is up to the caller: rendezvous for punch scenarios,
/// probe servers for NAT tests.
struct Roles {
    std::string server;                       // rendezvous host
    std::vector<std::string> peers;           // punching clients, in order
    std::string client;                       // NAT-test client
    std::vector<std::string> probe_servers;   // NAT-test servers, in order
};

struct World {
    sim::SimNet net;
    Roles roles;
    std::map<std::string, uint16_t> peer_ports;

    explicit World(uint64_t seed) : net(seed) {}
};

/// Peers behind two different NATs, the base hole-punching topology.
inline std::unique_ptr<World> make_two_nats(uint64_t seed, NatConfig nat_a, NatConfig nat_b,
                                            sim::LinkOpts link_a = {}, sim::LinkOpts link_b = {}) {
    auto w = std::make_unique<World>(seed);
    w->net.add_realm("pub");
    w->net.add_realm("lan-a");
    w->net.add_realm("lan-b");
    w->net.add_host("S", "pub", "18.181.0.31");
    w->net.add_host("A", "lan-a", "10.0.0.1", link_a);
    w->net.add_host("B", "lan-b", "10.1.1.3", link_b);
    nat_a.port_alloc = PortAlloc::sequential(62000);
    nat_b.port_alloc = PortAlloc::sequential(31000);
    w->net.add_nat("nat-a", "lan-a", "pub", "155.99.25.11", nat_a);
    w->net.add_nat("nat-b", "lan-b", "pub", "138.76.29.7", nat_b);
    w->roles.server = "S";
    w->roles.peers = {"A", "B"};
    w->peer_ports = {{"A", 4321}, {"B", 4321}};
    return w;
}

/// Both peers behind one common NAT. Registration order A-then-B lands them
/// on public ports 62000 and 62005.
inline std::unique_ptr<World> make_common_nat(uint64_t seed, NatConfig common) {
    auto w = std::make_unique<World>(seed);
    w->net.add_realm("pub");
    w->net.add_realm("lan");
    w->net.add_host("S", "pub", "18.181.0.31");
    w->net.add_host("A", "lan", "10.0.0.1");
    w->net.add_host("B", "lan", "10.1.1.3");
    common.port_alloc = PortAlloc::sequential(62000, 5);
    w->net.add_nat("nat-c", "lan", "pub", "155.99.25.11", common);
    w->roles.server = "S";
    w->roles.peers = {"A", "B"};
    w->peer_ports = {{"A", 4321}, {"B", 4321}};
    return w;
}

/// Multi-level: each peer behind its own NAT, both of those behind one
/// first-level NAT owning the public address.
inline std::unique_ptr<World> make_multi_level(uint64_t seed, NatConfig top, NatConfig inner_a,
                                               NatConfig inner_b) {
    auto w = std::make_unique<World>(seed);
    w->net.add_realm("pub");
    w->net.add_realm("semi");
    w->net.add_realm("lan-a");
    w->net.add_realm("lan-b");
    w->net.add_host("S", "pub", "18.181.0.31");
    w->net.add_host("A", "lan-a", "10.0.0.1");
    w->net.add_host("B", "lan-b", "10.1.1.3");
    inner_a.port_alloc = PortAlloc::sequential(45000);
    inner_b.port_alloc = PortAlloc::sequential(55000);
    top.port_alloc = PortAlloc::sequential(62000, 5);
    w->net.add_nat("nat-a", "lan-a", "semi", "10.0.1.1", inner_a);
    w->net.add_nat("nat-b", "lan-b", "semi", "10.0.1.2", inner_b);
    w->net.add_nat("nat-c", "semi", "pub", "155.99.25.11", top);
    w->roles.server = "S";
    w->roles.peers = {"A", "B"};
    w->peer_ports = {{"A", 4321}, {"B", 4321}};
    return w;
}

/// One client behind the NAT under test, three probe servers outside.
inline std::unique_ptr<World> make_probe(uint64_t seed, NatConfig nat) {
    auto w = std::make_unique<World>(seed);
    w->net.add_realm("pub");
    w->net.add_realm("lan");
    w->net.add_host("s1", "pub", "18.181.0.31");
    w->net.add_host("s2", "pub", "18.181.0.32");
    w->net.add_host("s3", "pub", "18.181.0.33");
    w->net.add_host("C", "lan", "10.0.0.1");
    w->net.add_nat("nat", "lan", "pub", "155.99.25.11", nat);
    w->roles.client = "C";
    w->roles.probe_servers = {"s1", "s2", "s3"};
    return w;
}

// ---------------------------------------------------------------------------
// Declarative scenario documents
// ---------------------------------------------------------------------------

struct ScriptAction {
    sim::SimTime at = 0;
    std::string action;  // "clear_nat"
    std::string target;
};

inline sim::LinkOpts link_opts_from_json(const json& j) {
    sim::LinkOpts l;
    l.latency = sim::operator""_ms(j.value("latency_ms", uint64_t{10}));
    l.loss_rate = j.value("loss", 0.0);
    l.drop_first = j.value("drop_first", 0);
    return l;
}

/// Builds a world from a scenario document:
///   realms: ["pub", ...]
///   hosts:  [{name, realm, addr, role?, port?, link?}, ...]
///   nats:   [{name, inner, outer, public, config?, link?}, ...]
///   script: [{at_s, action, target}, ...]
/// Roles: "server" (rendezvous), "peer" (in file order), "client",
/// "probe_server" (in file order).
inline std::unique_ptr<World> load(const json& doc, uint64_t seed,
                                   std::vector<ScriptAction>* script_out = nullptr) {
    auto w = std::make_unique<World>(seed);
    for (const auto& r : doc.at("realms")) w->net.add_realm(r.get<std::string>());
    for (const auto& h : doc.at("hosts")) {
        sim::LinkOpts link;
        if (h.contains("link")) link = link_opts_from_json(h.at("link"));
        std::string name = h.at("name");
        w->net.add_host(name, h.at("realm"), h.at("addr"), link);
        std::string role = h.value("role", "");
        if (role == "server") w->roles.server = name;
        if (role == "peer") {
            w->roles.peers.push_back(name);
            w->peer_ports[name] = h.value("port", 4321);
        }
        if (role == "client") w->roles.client = name;
        if (role == "probe_server") w->roles.probe_servers.push_back(name);
    }
    for (const auto& n : doc.value("nats", json::array())) {
        NatConfig cfg;
        if (n.contains("config")) cfg = nat_config_from_json(n.at("config"));
        sim::LinkOpts link;
        if (n.contains("link")) link = link_opts_from_json(n.at("link"));
        w->net.add_nat(n.at("name"), n.at("inner"), n.at("outer"), n.at("public"), cfg, link);
    }
    if (script_out) {
        for (const auto& s : doc.value("script", json::array())) {
            ScriptAction a;
            a.at = sim::operator""_s(s.at("at_s").get<uint64_t>());
            a.action = s.at("action");
            a.target = s.value("target", "");
            script_out->push_back(a);
        }
    }
    return w;
}

inline std::unique_ptr<World> load_file(const std::string& path, uint64_t seed,
                                        std::vector<ScriptAction>* script_out = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scenario file: " + path);
    json doc = json::parse(in);
    return load(doc, seed, script_out);
}

/// Arms script actions on the world's event loop.
inline void schedule_script(World& w, const std::vector<ScriptAction>& script) {
    for (const auto& a : script) {
        if (a.action == "clear_nat") {
            std::string nat = a.target;
            sim::SimNet* net = &w.net;
            sim::SimTime delay = a.at - w.net.now();
            w.net.loop().schedule(delay, [net, nat] { net->nat(nat).box().clear(); });
        } else {
            throw std::invalid_argument("unknown script action: " + a.action);
        }
    }
}

} // namespace holepunch::scenario
