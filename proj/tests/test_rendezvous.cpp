//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#include <catch2/catch_amalgamated.hpp>

#include "holepunch/rendezvous.hpp"

using namespace holepunch;
using namespace holepunch::sim;

namespace {

struct World {
    SimNet net{3};
    Host* s;
    Host* a;
    Host* b;
    std::optional<RendezvousServer> server;

    World() {
        net.add_realm("pub");
        net.add_realm("lan-a");
        net.add_realm("lan-b");
        s = &net.add_host("S", "pub", "18.181.0.31");
        a = &net.add_host("A", "lan-a", "10.0.0.1");
        b = &net.add_host("B", "lan-b", "10.1.1.3");
        NatConfig ca, cb;
        ca.port_alloc = PortAlloc::sequential(62000);
        cb.port_alloc = PortAlloc::sequential(31000);
        net.add_nat("nat-a", "lan-a", "pub", "155.99.25.11", ca);
        net.add_nat("nat-b", "lan-b", "pub", "138.76.29.7", cb);
        server.emplace(net, *s);
    }
};

// Minimal scripted UDP client: binds a port and records decoded messages.
struct UdpClient {
    Host& host;
    uint16_t port;
    std::vector<ControlMessage> inbox;

    UdpClient(Host& h, uint16_t p) : host(h), port(p) {
        host.bind_udp(port, [this](const Packet& pkt) {
            if (auto m = try_decode(pkt.payload, Transport::udp)) inbox.push_back(*m);
        });
    }
    void send(const Endpoint& to, const ControlMessage& m) {
        host.send_udp(port, to, encode_message(m));
    }
};

} // namespace

TEST_CASE("registration reflects the observed public endpoint") {
    World w;
    UdpClient a(*w.a, 4321);
    a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    w.net.run_until(1_s);

    REQUIRE(a.inbox.size() == 1);
    auto ok = std::get<RegisterOkMsg>(a.inbox[0]);
    CHECK(format(ok.public_ep) == "155.99.25.11:62000");

    const auto* rec = w.server->find_record("A", Transport::udp);
    REQUIRE(rec);
    CHECK(format(rec->private_ep) == "10.0.0.1:4321");
    CHECK(format(rec->public_ep) == "155.99.25.11:62000");
    CHECK(rec->behind_nat());
}

TEST_CASE("connect fans out mirrored forwards with one nonce") {
    World w;
    UdpClient a(*w.a, 4321);
    UdpClient b(*w.b, 4321);
    a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    b.send(w.server->udp_endpoint(), RegisterMsg{"B", w.b->udp_endpoint(4321)});
    w.net.run_until(1_s);
    a.send(w.server->udp_endpoint(), ConnectMsg{"A", "B", Nonce{}});
    w.net.run_until(2_s);

    REQUIRE(a.inbox.size() == 2);
    REQUIRE(b.inbox.size() == 2);
    auto to_a = std::get<ForwardMsg>(a.inbox[1]);
    auto to_b = std::get<ForwardMsg>(b.inbox[1]);
    CHECK(to_a.peer == "B");
    CHECK(format(to_a.public_ep) == "138.76.29.7:31000");
    CHECK(format(to_a.private_ep) == "10.1.1.3:4321");
    CHECK(to_b.peer == "A");
    CHECK(format(to_b.public_ep) == "155.99.25.11:62000");
    CHECK(format(to_b.private_ep) == "10.0.0.1:4321");
    CHECK(to_a.nonce == to_b.nonce);
    CHECK(to_a.nonce != Nonce{});
}

TEST_CASE("connect to an unknown peer reports an error") {
    World w;
    UdpClient a(*w.a, 4321);
    a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    w.net.run_until(1_s);
    a.send(w.server->udp_endpoint(), ConnectMsg{"A", "Z", Nonce{}});
    w.net.run_until(2_s);

    REQUIRE(a.inbox.size() == 2);
    auto err = std::get<ErrorMsg>(a.inbox[1]);
    CHECK(err.reason.find("Z") != std::string::npos);
}

TEST_CASE("stale registrations stop resolving") {
    World w;
    UdpClient a(*w.a, 4321);
    UdpClient b(*w.b, 4321);
    a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    b.send(w.server->udp_endpoint(), RegisterMsg{"B", w.b->udp_endpoint(4321)});
    w.net.run_until(1_s);
    // B falls silent past the staleness horizon; A re-registers to stay fresh
    w.net.loop().schedule(299_s, [&] {
        a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    });
    w.net.run_until(400_s);
    a.send(w.server->udp_endpoint(), ConnectMsg{"A", "B", Nonce{}});
    w.net.run_until(401_s);

    auto err = std::get<ErrorMsg>(a.inbox.back());
    CHECK(err.reason.find("B") != std::string::npos);
}

TEST_CASE("relay carries opaque payloads between registered peers") {
    World w;
    UdpClient a(*w.a, 4321);
    UdpClient b(*w.b, 4321);
    a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    b.send(w.server->udp_endpoint(), RegisterMsg{"B", w.b->udp_endpoint(4321)});
    w.net.run_until(1_s);
    std::string payload = "opaque \\\"quoted\\\" body";
    a.send(w.server->udp_endpoint(), RelayMsg{"B", payload});
    w.net.run_until(2_s);

    auto deliver = std::get<RelayDeliverMsg>(b.inbox.back());
    CHECK(deliver.from == "A");
    CHECK(deliver.payload == payload);
}

TEST_CASE("relay from an endpoint the server has never seen is rejected") {
    World w;
    UdpClient a(*w.a, 4321);
    a.send(w.server->udp_endpoint(), RelayMsg{"B", "hi"});
    w.net.run_until(1_s);
    REQUIRE(a.inbox.size() == 1);
    CHECK(std::holds_alternative<ErrorMsg>(a.inbox[0]));
}

TEST_CASE("reversal is granted only when one side is un-NATted") {
    World w;
    Endpoint pub_a = parse_endpoint("155.99.25.11:62000");
    Endpoint priv_a = parse_endpoint("10.0.0.1:4321");
    Endpoint open_b = parse_endpoint("138.76.29.7:4321");
    w.server->handle_register(RegisterMsg{"A", priv_a}, pub_a);
    w.server->handle_register(RegisterMsg{"B", open_b}, open_b);

    SECTION("target un-NATted: requester connects out") {
        auto r = w.server->handle_connect(ConnectMsg{"A", "B", Nonce{}, false, true}, Transport::udp);
        auto& [to_requester, to_target] = std::get<0>(r);
        CHECK(to_requester.reversal);
        CHECK(to_target.direct);
    }
    SECTION("requester un-NATted: target connects back") {
        auto r = w.server->handle_connect(ConnectMsg{"B", "A", Nonce{}, false, true}, Transport::udp);
        auto& [to_requester, to_target] = std::get<0>(r);
        CHECK(to_requester.direct);
        CHECK(to_target.reversal);
    }
    SECTION("both NATted: explicit error") {
        w.server->handle_register(RegisterMsg{"C", parse_endpoint("10.1.1.3:4321")},
                                  parse_endpoint("138.76.29.7:31000"));
        auto r = w.server->handle_connect(ConnectMsg{"A", "C", Nonce{}, false, true}, Transport::udp);
        CHECK(std::holds_alternative<ErrorMsg>(r));
    }
}

TEST_CASE("the tcp side runs the same protocol over framed streams") {
    World w;
    struct TcpClient {
        TcpConnPtr conn;
        std::string buffer;
        std::vector<ControlMessage> inbox;

        void attach(TcpConnPtr c) {
            conn = c;
            c->on_data = [this](const std::string& bytes) {
                buffer += bytes;
                size_t nl;
                while ((nl = buffer.find('\n')) != std::string::npos) {
                    std::string line = buffer.substr(0, nl);
                    buffer.erase(0, nl + 1);
                    if (auto m = try_decode(line, Transport::tcp)) inbox.push_back(*m);
                }
            };
        }
        void send(const ControlMessage& m) { conn->send(encode_message(m) + "\n"); }
    };

    TcpClient ca, cb;
    auto conn_a = w.a->tcp_open(4321, w.server->tcp_endpoint());
    ca.attach(conn_a);
    conn_a->on_established = [&] { ca.send(RegisterMsg{"A", w.a->tcp_endpoint(4321)}); };
    auto conn_b = w.b->tcp_open(4321, w.server->tcp_endpoint());
    cb.attach(conn_b);
    conn_b->on_established = [&] { cb.send(RegisterMsg{"B", w.b->tcp_endpoint(4321)}); };
    w.net.run_until(2_s);

    REQUIRE(ca.inbox.size() == 1);
    CHECK(format(std::get<RegisterOkMsg>(ca.inbox[0]).public_ep) == "155.99.25.11:62000");
    REQUIRE(cb.inbox.size() == 1);
    CHECK(format(std::get<RegisterOkMsg>(cb.inbox[0]).public_ep) == "138.76.29.7:31000");

    ca.send(ConnectMsg{"A", "B", Nonce{}});
    w.net.run_until(4_s);
    REQUIRE(ca.inbox.size() == 2);
    REQUIRE(cb.inbox.size() == 2);
    auto to_a = std::get<ForwardMsg>(ca.inbox[1]);
    auto to_b = std::get<ForwardMsg>(cb.inbox[1]);
    CHECK(to_a.peer == "B");
    CHECK(to_b.peer == "A");
    CHECK(format(to_b.public_ep) == "155.99.25.11:62000");
    CHECK(to_a.nonce == to_b.nonce);
}

TEST_CASE("re-registration overwrites the previous endpoints") {
    World w;
    UdpClient a(*w.a, 4321);
    a.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(4321)});
    w.net.run_until(1_s);
    // NAT restart: new mapping, new observed endpoint on the next register
    w.net.nat("nat-a").box().clear();
    UdpClient a2(*w.a, 5000);
    a2.send(w.server->udp_endpoint(), RegisterMsg{"A", w.a->udp_endpoint(5000)});
    w.net.run_until(2_s);

    const auto* rec = w.server->find_record("A", Transport::udp);
    REQUIRE(rec);
    CHECK(format(rec->private_ep) == "10.0.0.1:5000");
    CHECK(format(rec->public_ep) == "155.99.25.11:62000");
}
