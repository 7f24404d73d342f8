//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "holepunch/message.hpp"
#include "holepunch/natbox.hpp"

using namespace holepunch;
using namespace holepunch::sim;

namespace {

Packet udp(const char* src, const char* dst, std::string payload = "x") {
    Packet p;
    p.src = parse_endpoint(src, Transport::udp);
    p.dst = parse_endpoint(dst, Transport::udp);
    p.transport = Transport::udp;
    p.payload = std::move(payload);
    return p;
}

Packet syn(const char* src, const char* dst) {
    Packet p;
    p.src = parse_endpoint(src, Transport::tcp);
    p.dst = parse_endpoint(dst, Transport::tcp);
    p.transport = Transport::tcp;
    p.tcp_flags = tcp_syn;
    return p;
}

NatConfig base_config() {
    NatConfig cfg;
    cfg.mapping = MappingPolicy::endpoint_independent;
    cfg.filtering = FilteringPolicy::address_dependent;
    cfg.port_alloc = PortAlloc::sequential(62000);
    cfg.udp_idle_timeout = 20_s;
    cfg.public_address = parse_address("155.99.25.11");
    return cfg;
}

} // namespace

TEST_CASE("preserve-then-sequential keeps the private port when free") {
    auto cfg = base_config();
    cfg.port_alloc = PortAlloc::preserve();
    NatBox nat(cfg);
    auto out = nat.translate_outbound(udp("10.0.0.1:4321", "18.181.0.31:1234"), 0);
    REQUIRE(out);
    CHECK(format(out->src) == "155.99.25.11:4321");

    // same private port from a second host: preservation would collide,
    // falls back to the sequential pool
    auto out2 = nat.translate_outbound(udp("10.0.0.2:4321", "18.181.0.31:1234"), 0);
    REQUIRE(out2);
    CHECK(format(out2->src) == "155.99.25.11:62000");
}

TEST_CASE("cone NAT reuses the public endpoint for every destination") {
    NatBox nat(base_config());
    auto to_s = nat.translate_outbound(udp("10.0.0.1:4321", "18.181.0.31:1234"), 0);
    REQUIRE(to_s);
    CHECK(format(to_s->src) == "155.99.25.11:62000");
    auto to_b = nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    REQUIRE(to_b);
    CHECK(format(to_b->src) == "155.99.25.11:62000");
}

TEST_CASE("symmetric NAT allocates a fresh port per destination") {
    auto cfg = base_config();
    cfg.mapping = MappingPolicy::address_port_dependent;
    NatBox nat(cfg);
    auto to_s = nat.translate_outbound(udp("10.0.0.1:4321", "18.181.0.31:1234"), 0);
    auto to_b = nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    REQUIRE((to_s && to_b));
    CHECK(format(to_s->src) == "155.99.25.11:62000");
    CHECK(format(to_b->src) == "155.99.25.11:62001");
}

TEST_CASE("cone consistency over all small interleavings") {
    // exhaustive: every destination sequence of length <= 4 over 4 targets
    std::vector<Endpoint> dests = {
        parse_endpoint("18.181.0.31:1234"), parse_endpoint("138.76.29.7:31000"),
        parse_endpoint("44.55.66.77:9999"), parse_endpoint("1.2.3.4:53")};
    for (int len = 1; len <= 4; ++len) {
        int total = 1;
        for (int i = 0; i < len; ++i) total *= 4;
        for (int code = 0; code < total; ++code) {
            NatBox nat(base_config());
            std::set<Endpoint> publics;
            int c = code;
            for (int i = 0; i < len; ++i) {
                Packet p = udp("10.0.0.1:4321", "1.1.1.1:1");
                p.dst = dests[c % 4];
                c /= 4;
                auto out = nat.translate_outbound(p, i);
                REQUIRE(out);
                publics.insert(out->src);
            }
            CHECK(publics.size() == 1);
        }
    }
}

TEST_CASE("symmetric inconsistency: distinct destinations see distinct ports") {
    auto cfg = base_config();
    cfg.mapping = MappingPolicy::address_port_dependent;
    NatBox nat(cfg);
    std::set<uint16_t> ports;
    for (int i = 0; i < 20; ++i) {
        Packet p = udp("10.0.0.1:4321", (std::to_string(i + 1) + ".2.3.4:5000").c_str());
        auto out = nat.translate_outbound(p, 0);
        REQUIRE(out);
        ports.insert(out->src.port);
    }
    CHECK(ports.size() == 20);
}

TEST_CASE("inbound delivery after a hole is punched") {
    NatBox nat(base_config());
    nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    auto in = nat.translate_inbound(udp("138.76.29.7:31000", "155.99.25.11:62000"), 1);
    auto* pkt = std::get_if<Packet>(&in);
    REQUIRE(pkt);
    CHECK(format(pkt->dst) == "10.0.0.1:4321");
}

TEST_CASE("filtering soundness against a reference predicate") {
    // Replays a randomized packet log through an independent model of
    // seen_remotes and checks every inbound verdict agrees.
    for (auto policy : {FilteringPolicy::endpoint_independent, FilteringPolicy::address_dependent,
                        FilteringPolicy::address_port_dependent}) {
        auto cfg = base_config();
        cfg.filtering = policy;
        NatBox nat(cfg);
        std::mt19937_64 rng(99);
        std::set<Endpoint> seen;  // reference model (one private endpoint in play)
        bool mapped = false;
        std::vector<Endpoint> remotes;
        for (int i = 0; i < 8; ++i)
            remotes.push_back(parse_endpoint(
                (std::to_string(20 + i / 2) + ".0.0.9:" + std::to_string(7000 + i)).c_str()));
        for (int step = 0; step < 400; ++step) {
            Endpoint remote = remotes[rng() % remotes.size()];
            if (rng() % 2 == 0) {
                Packet p = udp("10.0.0.1:4321", "1.1.1.1:1");
                p.dst = remote;
                REQUIRE(nat.translate_outbound(p, 0));
                seen.insert(remote);
                mapped = true;
            } else {
                Packet p = udp("1.1.1.1:1", "155.99.25.11:62000");
                p.src = remote;
                auto result = nat.translate_inbound(p, 0);
                bool delivered = std::holds_alternative<Packet>(result);
                bool expect = false;
                if (mapped) {
                    switch (policy) {
                    case FilteringPolicy::endpoint_independent: expect = true; break;
                    case FilteringPolicy::address_dependent:
                        for (const auto& s : seen) expect = expect || s.addr == remote.addr;
                        break;
                    case FilteringPolicy::address_port_dependent:
                        expect = seen.count(remote) > 0;
                        break;
                    }
                }
                CHECK(delivered == expect);
            }
        }
    }
}

TEST_CASE("unsolicited TCP SYN handling") {
    SECTION("drop") {
        NatBox nat(base_config());
        auto r = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62000"), 0);
        CHECK(std::holds_alternative<InboundDrop>(r));
    }
    SECTION("rst") {
        auto cfg = base_config();
        cfg.tcp_unsolicited = TcpUnsolicited::rst;
        NatBox nat(cfg);
        auto r = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62000"), 0);
        auto* rst = std::get_if<InboundRst>(&r);
        REQUIRE(rst);
        CHECK(rst->rst.tcp_flags == tcp_rst);
        CHECK(format(rst->rst.dst) == "138.76.29.7:31000");
        CHECK(format(rst->rst.src) == "155.99.25.11:62000");
    }
    SECTION("allow forwards only onto a live mapping") {
        auto cfg = base_config();
        cfg.tcp_unsolicited = TcpUnsolicited::allow;
        NatBox nat(cfg);
        // no mapping yet: nothing to hit
        auto r1 = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62000"), 0);
        CHECK(std::holds_alternative<InboundDrop>(r1));
        // open a TCP mapping, then the pass-through works
        REQUIRE(nat.translate_outbound(syn("10.0.0.1:4321", "18.181.0.31:1234"), 0));
        auto r2 = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62000"), 1);
        auto* fwd = std::get_if<Packet>(&r2);
        REQUIRE(fwd);
        CHECK(format(fwd->dst) == "10.0.0.1:4321");
    }
}

TEST_CASE("hairpin translation rewrites both endpoints") {
    auto cfg = base_config();
    cfg.hairpin = true;
    cfg.port_alloc = PortAlloc::sequential(62000, 5);
    NatBox nat(cfg);
    // sessions with S establish the two mappings (62000 and 62005)
    REQUIRE(nat.translate_outbound(udp("10.0.1.1:45000", "18.181.0.31:1234"), 0));
    REQUIRE(nat.translate_outbound(udp("10.0.1.2:55000", "18.181.0.31:1234"), 0));

    auto looped = nat.hairpin_translate(udp("10.0.1.1:45000", "155.99.25.11:62005"), 1);
    REQUIRE(looped);
    CHECK(format(looped->src) == "155.99.25.11:62000");
    CHECK(format(looped->dst) == "10.0.1.2:55000");

    SECTION("unmapped public port drops") {
        CHECK_FALSE(nat.hairpin_translate(udp("10.0.1.1:45000", "155.99.25.11:62999"), 1));
    }
}

TEST_CASE("hairpin disabled drops the packet") {
    NatBox nat(base_config());
    REQUIRE(nat.translate_outbound(udp("10.0.1.2:55000", "18.181.0.31:1234"), 0));
    CHECK_FALSE(nat.hairpin_translate(udp("10.0.1.1:45000", "155.99.25.11:62000"), 1));
}

TEST_CASE("udp mappings expire on idle, tcp mappings do not") {
    auto cfg = base_config();
    NatBox nat(cfg);
    nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    nat.translate_outbound(syn("10.0.0.2:5000", "138.76.29.7:31000"), 0);

    SECTION("idle exactly the timeout expires") {
        CHECK(nat.expire_mappings(20_s) == 1);  // only the UDP entry
        auto in = nat.translate_inbound(udp("138.76.29.7:31000", "155.99.25.11:62000"), 20_s);
        CHECK(std::holds_alternative<InboundDrop>(in));
    }
    SECTION("keep-alives every 15s keep the hole open") {
        for (SimTime t = 15_s; t <= 120_s; t += 15_s)
            nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), t);
        CHECK(nat.expire_mappings(120_s) == 0);
        auto in = nat.translate_inbound(udp("138.76.29.7:31000", "155.99.25.11:62000"), 120_s);
        CHECK(std::holds_alternative<Packet>(in));
    }
    SECTION("tcp entry survives an hour idle") {
        CHECK(nat.expire_mappings(3600_s) == 1);  // UDP gone, TCP retained
        auto in = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62001"), 3600_s);
        // TCP mapping alive; sender already in seen_remotes so the SYN passes
        CHECK(std::holds_alternative<Packet>(in));
    }
}

TEST_CASE("private-side RST closes only that remote's session") {
    NatBox nat(base_config());
    nat.translate_outbound(syn("10.0.0.1:4321", "18.181.0.31:1234"), 0);
    nat.translate_outbound(syn("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    // close the session with S; the hole toward B must survive
    Packet rst = syn("10.0.0.1:4321", "18.181.0.31:1234");
    rst.tcp_flags = tcp_rst;
    REQUIRE(nat.translate_outbound(rst, 1));
    auto in = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62000"), 2);
    CHECK(std::holds_alternative<Packet>(in));
    // once the last session closes, the mapping goes with it
    Packet rst2 = syn("10.0.0.1:4321", "138.76.29.7:31000");
    rst2.tcp_flags = tcp_rst;
    REQUIRE(nat.translate_outbound(rst2, 3));
    auto in2 = nat.translate_inbound(syn("138.76.29.7:31000", "155.99.25.11:62000"), 4);
    CHECK(std::holds_alternative<InboundDrop>(in2));
}

TEST_CASE("port pool exhaustion drops and counts") {
    auto cfg = base_config();
    cfg.mapping = MappingPolicy::address_port_dependent;
    cfg.pool_size = 3;
    NatBox nat(cfg);
    for (int i = 0; i < 3; ++i) {
        auto out = nat.translate_outbound(
            udp("10.0.0.1:4321", (std::to_string(i + 1) + ".0.0.1:1000").c_str()), 0);
        CHECK(out);
    }
    auto dropped = nat.translate_outbound(udp("10.0.0.1:4321", "9.0.0.1:1000"), 0);
    CHECK_FALSE(dropped);
    CHECK(nat.exhaustion_count() == 1);
}

TEST_CASE("public ports never collide across live entries") {
    auto cfg = base_config();
    cfg.mapping = MappingPolicy::address_port_dependent;
    cfg.port_alloc = PortAlloc::random(5);
    NatBox nat(cfg);
    std::set<uint16_t> live;
    for (int i = 0; i < 200; ++i) {
        auto out = nat.translate_outbound(
            udp("10.0.0.1:4321", ("8.8." + std::to_string(i % 250) + ".4:" + std::to_string(100 + i)).c_str()),
            0);
        REQUIRE(out);
        CHECK(live.insert(out->src.port).second);
    }
}

TEST_CASE("payload rewriting translates raw mapped addresses only") {
    auto cfg = base_config();
    cfg.payload_rewrite = true;
    NatBox nat(cfg);

    // aligned raw private address in the body gets translated
    std::string body;
    for (uint8_t b : {0x0A, 0x00, 0x00, 0x01}) body.push_back(static_cast<char>(b));
    body += "tail";
    Packet p = udp("10.0.0.1:4321", "18.181.0.31:1234", body);
    auto out = nat.translate_outbound(p, 0);
    REQUIRE(out);
    CHECK(static_cast<uint8_t>(out->payload[0]) == 155);
    CHECK(static_cast<uint8_t>(out->payload[3]) == 11);
    CHECK(out->payload.substr(4) == "tail");

    // the obfuscated JSON wire form stays intact end to end
    auto msg = RegisterMsg{"A", parse_endpoint("10.0.0.1:4321")};
    Packet wire = udp("10.0.0.1:4321", "18.181.0.31:1234", encode_message(msg));
    auto out2 = nat.translate_outbound(wire, 1);
    REQUIRE(out2);
    auto decoded = decode_message(out2->payload);
    CHECK(std::get<RegisterMsg>(decoded).private_ep == parse_endpoint("10.0.0.1:4321"));
}

TEST_CASE("hole lifetime: expired mapping drops subsequent inbound") {
    NatBox nat(base_config());
    nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    CHECK(nat.expire_mappings(25_s) == 1);
    auto in = nat.translate_inbound(udp("138.76.29.7:31000", "155.99.25.11:62000"), 25_s);
    CHECK(std::holds_alternative<InboundDrop>(in));
}

TEST_CASE("nat restart clears all translation state") {
    NatBox nat(base_config());
    nat.translate_outbound(udp("10.0.0.1:4321", "138.76.29.7:31000"), 0);
    nat.clear();
    auto in = nat.translate_inbound(udp("138.76.29.7:31000", "155.99.25.11:62000"), 1);
    CHECK(std::holds_alternative<InboundDrop>(in));
    CHECK(nat.live_mappings(1) == 0);
}

TEST_CASE("predict_next_port infers a constant stride") {
    using Obs = std::pair<Endpoint, uint16_t>;
    Endpoint d1 = parse_endpoint("18.181.0.31:1234");
    Endpoint d2 = parse_endpoint("18.181.0.31:1235");
    Endpoint d3 = parse_endpoint("19.0.0.1:1234");

    std::vector<Obs> one = {{d1, 62000}, {d2, 62001}};
    CHECK(predict_next_port(one) == 62002);

    std::vector<Obs> ten = {{d1, 62000}, {d2, 62010}};
    CHECK(predict_next_port(ten) == 62020);

    std::vector<Obs> skewed = {{d1, 62000}, {d2, 62001}, {d3, 62005}};
    CHECK_FALSE(predict_next_port(skewed).has_value());

    std::vector<Obs> short_list = {{d1, 62000}};
    CHECK_FALSE(predict_next_port(short_list).has_value());
}

TEST_CASE("sequential allocation follows the configured stride") {
    auto cfg = base_config();
    cfg.mapping = MappingPolicy::address_port_dependent;
    cfg.port_alloc = PortAlloc::sequential(31000, 10);
    cfg.public_address = parse_address("138.76.29.7");
    NatBox nat(cfg);
    auto a = nat.translate_outbound(udp("10.1.1.3:4321", "18.181.0.31:1234"), 0);
    auto b = nat.translate_outbound(udp("10.1.1.3:4321", "18.181.0.31:1235"), 0);
    auto c = nat.translate_outbound(udp("10.1.1.3:4321", "20.0.0.1:1234"), 0);
    REQUIRE((a && b && c));
    CHECK(a->src.port == 31000);
    CHECK(b->src.port == 31010);
    CHECK(c->src.port == 31020);
}
