//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <functional>
#include <optional>
#include <string>

#include <json.hpp>

#include "holepunch/message.hpp"
#include "holepunch/scenario.hpp"
#include "holepunch/sim/net.hpp"

namespace holepunch {

/// What the probing battery could determine about the NAT in front of the
/// client. Fields stay empty when a sub-test could not settle the question;
/// in particular tcp_unsolicited is indeterminable through an inconsistent
/// (symmetric) mapping unless an inbound connection actually showed up.
struct NatProfile {
    std::optional<bool> no_nat;
    std::optional<bool> udp_consistent;
    std::optional<bool> udp_filters_unsolicited;
    std::optional<bool> udp_hairpin;
    std::optional<bool> tcp_consistent;
    std::optional<TcpUnsolicited> tcp_unsolicited_observed;
    std::optional<bool> tcp_hairpin;

    friend bool operator==(const NatProfile&, const NatProfile&) = default;
};

inline nlohmann::ordered_json to_json(const NatProfile& p) {
    nlohmann::ordered_json j;
    auto put = [&](const char* key, const std::optional<bool>& v) {
        if (v) j[key] = *v;
        else j[key] = nullptr;
    };
    put("no_nat", p.no_nat);
    put("udp_consistent", p.udp_consistent);
    put("udp_filters_unsolicited", p.udp_filters_unsolicited);
    put("udp_hairpin", p.udp_hairpin);
    put("tcp_consistent", p.tcp_consistent);
    if (p.tcp_unsolicited_observed)
        j["tcp_unsolicited"] = scenario::to_string(*p.tcp_unsolicited_observed);
    else
        j["tcp_unsolicited"] = nullptr;
    put("tcp_hairpin", p.tcp_hairpin);
    return j;
}

/// Hole-punching prospects derived from a profile. The strict TCP verdict
/// counts RST-answering NATs as unfriendly; the lenient one tolerates them
/// since punching still gets through, just with retries.
struct Verdict {
    std::optional<bool> udp_punch;
    std::optional<bool> udp_hairpin;
    std::optional<bool> tcp_punch_strict;
    std::optional<bool> tcp_punch_lenient;
    std::optional<bool> tcp_hairpin;

    friend bool operator==(const Verdict&, const Verdict&) = default;
};

inline Verdict classify(const NatProfile& p) {
    Verdict v;
    v.udp_punch = p.udp_consistent;
    v.udp_hairpin = p.udp_hairpin;
    v.tcp_punch_lenient = p.tcp_consistent;
    if (p.tcp_consistent) {
        if (!*p.tcp_consistent)
            v.tcp_punch_strict = false;
        else if (p.tcp_unsolicited_observed)
            v.tcp_punch_strict = *p.tcp_unsolicited_observed != TcpUnsolicited::rst;
    }
    v.tcp_hairpin = p.tcp_hairpin;
    return v;
}

// ---------------------------------------------------------------------------
// Probe servers
// ---------------------------------------------------------------------------

/// The three-server battery. Servers 1 and 2 echo the observed endpoint;
/// server 2 additionally tips off server 3, which probes the client from an
/// address the client has never contacted. Signaling between s2 and s3 runs
/// over their own UDP ports.
class ProbeServers {
public:
    static constexpr uint16_t port = 1234;

    ProbeServers(sim::SimNet& net, sim::Host& s1, sim::Host& s2, sim::Host& s3)
        : net_(net), s1_(s1), s2_(s2), s3_(s3) {
        s1_.bind_udp(port, [this](const sim::Packet& pkt) { udp_echo(s1_, pkt); });
        s2_.bind_udp(port, [this](const sim::Packet& pkt) { s2_udp(pkt); });
        s3_.bind_udp(port, [this](const sim::Packet& pkt) { s3_udp(pkt); });
        s1_.tcp_listen(port, [this](sim::TcpConnPtr conn) { tcp_echo(conn); });
        s2_.tcp_listen(port, [this](sim::TcpConnPtr conn) { s2_tcp(conn); });
        // s3 deliberately has no TCP listener: in the RST case its probe is
        // long dead and the client's connect must meet a refusal
    }

    Endpoint s1_udp() const { return s1_.udp_endpoint(port); }
    Endpoint s2_udp() const { return s2_.udp_endpoint(port); }
    Endpoint s3_udp() const { return s3_.udp_endpoint(port); }
    Endpoint s1_tcp() const { return s1_.tcp_endpoint(port); }
    Endpoint s2_tcp() const { return s2_.tcp_endpoint(port); }
    Endpoint s3_tcp() const { return s3_.tcp_endpoint(port); }

private:
    struct Framing {
        std::string buffer;
    };

    void udp_echo(sim::Host& server, const sim::Packet& pkt) {
        auto m = try_decode(pkt.payload, Transport::udp);
        if (m && std::holds_alternative<RegisterMsg>(*m))
            server.send_udp(port, pkt.src, encode_message(RegisterOkMsg{pkt.src}));
    }

    void s2_udp(const sim::Packet& pkt) {
        auto m = try_decode(pkt.payload, Transport::udp);
        if (m && std::holds_alternative<RegisterMsg>(*m)) {
            s2_.send_udp(port, pkt.src, encode_message(RegisterOkMsg{pkt.src}));
            signal_s3("udp " + format(pkt.src));
            return;
        }
        if (m && std::holds_alternative<RelayDeliverMsg>(*m)) {
            // go-ahead from s3: release the held TCP reply
            if (held_conn_) {
                held_conn_->send(encode_message(RegisterOkMsg{held_observed_}) + "\n");
                held_conn_.reset();
            }
        }
    }

    void s3_udp(const sim::Packet& pkt) {
        auto m = try_decode(pkt.payload, Transport::udp);
        if (!m || !std::holds_alternative<RelayDeliverMsg>(*m)) return;
        const auto& tip = std::get<RelayDeliverMsg>(*m).payload;
        if (tip.rfind("udp ", 0) == 0) {
            // unsolicited reply from a third address the client never pinged
            Endpoint client = parse_endpoint(tip.substr(4), Transport::udp);
            s3_.send_udp(port, client, encode_message(HelloMsg{"s3", Nonce{}}));
            return;
        }
        if (tip.rfind("tcp ", 0) == 0) {
            Endpoint client = parse_endpoint(tip.substr(4), Transport::tcp);
            sim::TcpOpenOpts opts;
            opts.max_tries = 25;  // 5s head start plus the 20s extended wait
            probe_ = s3_.tcp_open(port, client, opts);
            probe_->on_failed = [this](sim::TcpConn::FailReason) { probe_.reset(); };
            probe_->on_established = [this] {
                probe_->send(encode_message(HelloMsg{"s3", Nonce{}}) + "\n");
            };
            net_.loop().schedule(sim::operator""_s(5ull), [this] {
                s3_.send_udp(port, s2_.udp_endpoint(port),
                             encode_message(RelayDeliverMsg{"s3", "go"}));
            });
        }
    }

    void tcp_echo(sim::TcpConnPtr conn) {
        auto framing = std::make_shared<Framing>();
        conn->on_data = [conn, framing](const std::string& bytes) {
            framing->buffer += bytes;
            size_t nl;
            while ((nl = framing->buffer.find('\n')) != std::string::npos) {
                std::string line = framing->buffer.substr(0, nl);
                framing->buffer.erase(0, nl + 1);
                auto m = try_decode(line, Transport::tcp);
                if (m && std::holds_alternative<RegisterMsg>(*m))
                    conn->send(encode_message(RegisterOkMsg{conn->key().remote}) + "\n");
            }
        };
    }

    void s2_tcp(sim::TcpConnPtr conn) {
        auto framing = std::make_shared<Framing>();
        conn->on_data = [this, conn, framing](const std::string& bytes) {
            framing->buffer += bytes;
            size_t nl;
            while ((nl = framing->buffer.find('\n')) != std::string::npos) {
                std::string line = framing->buffer.substr(0, nl);
                framing->buffer.erase(0, nl + 1);
                auto m = try_decode(line, Transport::tcp);
                if (m && std::holds_alternative<RegisterMsg>(*m)) {
                    held_conn_ = conn;
                    held_observed_ = conn->key().remote;
                    signal_s3("tcp " + format(conn->key().remote));
                }
            }
        };
    }

    void signal_s3(const std::string& tip) {
        s2_.send_udp(port, s3_.udp_endpoint(port), encode_message(RelayDeliverMsg{"s2", tip}));
    }

    sim::SimNet& net_;
    sim::Host& s1_;
    sim::Host& s2_;
    sim::Host& s3_;
    sim::TcpConnPtr probe_;
    sim::TcpConnPtr held_conn_;
    Endpoint held_observed_;
};

// ---------------------------------------------------------------------------
// Client driver
// ---------------------------------------------------------------------------

/// Runs the full battery sequentially against a probe world and returns the
/// profile. Drives the world's event loop itself.
class NatCheck {
public:
    static constexpr sim::SimTime reply_wait = sim::operator""_s(5ull);
    static constexpr sim::SimTime tcp_phase_wait = sim::operator""_s(30ull);

    NatCheck(scenario::World& world, uint16_t client_port = 4321)
        : net_(world.net), client_(world.net.host(world.roles.client)),
          servers_(world.net, world.net.host(world.roles.probe_servers.at(0)),
                   world.net.host(world.roles.probe_servers.at(1)),
                   world.net.host(world.roles.probe_servers.at(2))),
          port_(client_port) {}

    NatProfile run() {
        run_udp_test();
        run_udp_hairpin_test();
        run_tcp_test();
        run_tcp_hairpin_test();
        return profile_;
    }

    const NatProfile& profile() const { return profile_; }

private:
    void run_udp_test() {
        client_.bind_udp(port_, [this](const sim::Packet& pkt) {
            auto m = try_decode(pkt.payload, Transport::udp);
            if (m && std::holds_alternative<RegisterOkMsg>(*m)) {
                const Endpoint& pub = std::get<RegisterOkMsg>(*m).public_ep;
                if (pkt.src == servers_.s1_udp()) udp_obs1_ = pub;
                if (pkt.src == servers_.s2_udp()) udp_obs2_ = pub;
            }
            if (m && std::holds_alternative<HelloMsg>(*m) &&
                pkt.src.addr == servers_.s3_udp().addr)
                s3_reply_seen_ = true;
            if (!m && pkt.payload == "hairpin-probe") hairpin_probe_seen_ = true;
        });
        auto ping = encode_message(RegisterMsg{"client", client_.udp_endpoint(port_)});
        client_.send_udp(port_, servers_.s1_udp(), ping);
        client_.send_udp(port_, servers_.s2_udp(), ping);
        net_.run_until(net_.now() + reply_wait);

        if (udp_obs1_ && udp_obs2_) {
            profile_.udp_consistent = *udp_obs1_ == *udp_obs2_;
            profile_.no_nat = *udp_obs1_ == client_.udp_endpoint(port_);
        }
        profile_.udp_filters_unsolicited = !s3_reply_seen_;
    }

    void run_udp_hairpin_test() {
        if (!udp_obs1_) return;  // nothing to aim at
        uint16_t second = port_ + 1;
        client_.bind_udp(second, [](const sim::Packet&) {});
        client_.send_udp(second, *udp_obs1_, "hairpin-probe");
        net_.run_until(net_.now() + reply_wait);
        profile_.udp_hairpin = hairpin_probe_seen_;
    }

    void run_tcp_test() {
        client_.tcp_listen(port_, [this](sim::TcpConnPtr conn) {
            if (conn->key().remote.addr == servers_.s3_tcp().addr && !inbound_at_)
                inbound_at_ = net_.now();
        });
        auto open_probe = [this](const Endpoint& server, std::optional<Endpoint>* obs,
                                 std::optional<sim::SimTime>* reply_at) {
            auto conn = client_.tcp_open(port_, server);
            auto framing = std::make_shared<std::string>();
            conn->on_established = [this, conn] {
                conn->send(encode_message(RegisterMsg{"client", client_.tcp_endpoint(port_)}) +
                           "\n");
            };
            conn->on_data = [obs, reply_at, framing, this](const std::string& bytes) {
                *framing += bytes;
                size_t nl;
                while ((nl = framing->find('\n')) != std::string::npos) {
                    std::string line = framing->substr(0, nl);
                    framing->erase(0, nl + 1);
                    auto m = try_decode(line, Transport::tcp);
                    if (m && std::holds_alternative<RegisterOkMsg>(*m)) {
                        *obs = std::get<RegisterOkMsg>(*m).public_ep;
                        if (reply_at) *reply_at = net_.now();
                    }
                }
            };
            return conn;
        };
        open_probe(servers_.s1_tcp(), &tcp_obs1_, nullptr);
        open_probe(servers_.s2_tcp(), &tcp_obs2_, &s2_reply_at_);

        // once s2 finally answers, dial out to s3: through a well-behaved
        // NAT this meets s3's still-running probe as a simultaneous open
        sim::SimTime phase_start = net_.now();
        auto poll = std::make_shared<std::function<void()>>();
        *poll = [this, poll, phase_start] {
            if (inbound_at_) return;  // already classified: nothing to dial
            if (s2_reply_at_ && !out_conn_) {
                out_conn_ = client_.tcp_open(port_, servers_.s3_tcp());
                out_conn_->on_established = [this] { out_ok_ = true; };
                out_conn_->on_failed = [this](sim::TcpConn::FailReason r) {
                    out_reset_ = r == sim::TcpConn::FailReason::reset;
                };
                return;
            }
            if (!out_conn_ && net_.now() - phase_start < tcp_phase_wait)
                net_.loop().schedule(sim::operator""_ms(100ull), *poll);
        };
        (*poll)();
        net_.run_until(phase_start + tcp_phase_wait);

        if (tcp_obs1_ && tcp_obs2_) {
            profile_.tcp_consistent =
                tcp_obs1_->port == tcp_obs2_->port && tcp_obs1_->addr == tcp_obs2_->addr;
        }
        if (inbound_at_ && s2_reply_at_ && *inbound_at_ < *s2_reply_at_) {
            profile_.tcp_unsolicited_observed = TcpUnsolicited::allow;
        } else if (profile_.tcp_consistent == true) {
            // through an inconsistent mapping the outcome of the dial-out
            // says nothing about the NAT's unsolicited-SYN policy
            if (out_ok_)
                profile_.tcp_unsolicited_observed = TcpUnsolicited::drop;
            else if (out_reset_)
                profile_.tcp_unsolicited_observed = TcpUnsolicited::rst;
        }
    }

    void run_tcp_hairpin_test() {
        if (!tcp_obs1_) return;
        uint16_t second = port_ + 2;
        hairpin_conn_ = client_.tcp_open(second, *tcp_obs1_);
        hairpin_conn_->on_established = [this] { profile_.tcp_hairpin = true; };
        net_.run_until(net_.now() + reply_wait);
        if (!profile_.tcp_hairpin) profile_.tcp_hairpin = false;
        hairpin_conn_->abort();
    }

    sim::SimNet& net_;
    sim::Host& client_;
    ProbeServers servers_;
    uint16_t port_;
    NatProfile profile_;
    std::optional<Endpoint> udp_obs1_, udp_obs2_;
    std::optional<Endpoint> tcp_obs1_, tcp_obs2_;
    std::optional<sim::SimTime> s2_reply_at_, inbound_at_;
    sim::TcpConnPtr out_conn_, hairpin_conn_;
    bool s3_reply_seen_ = false;
    bool hairpin_probe_seen_ = false;
    bool out_ok_ = false, out_reset_ = false;
};

/// Ground truth: the profile the battery is expected to produce for a NAT
/// configured this way. Encodes the observability rules: an
/// endpoint-independent filter admits any inbound traffic on a mapped port,
/// so the configured SYN policy never gets a chance to show.
inline NatProfile expected_profile(const NatConfig& c) {
    bool ei_map = c.mapping == MappingPolicy::endpoint_independent;
    bool ei_fil = c.filtering == FilteringPolicy::endpoint_independent;
    NatProfile p;
    p.no_nat = false;
    p.udp_consistent = ei_map;
    p.udp_filters_unsolicited = !ei_fil;
    p.udp_hairpin = c.hairpin && (!c.hairpin_filter || ei_fil);
    p.tcp_consistent = ei_map;
    // inbound handshakes need the reply to leave through the same mapping,
    // so nothing about the SYN policy is observable past a non-EI mapping:
    // even an admitted SYN gets its SYN-ACK sent from a different port
    if (ei_map)
        p.tcp_unsolicited_observed = ei_fil ? TcpUnsolicited::allow : c.tcp_unsolicited;
    // hairpinned TCP needs the return path to reuse the same mapping, so a
    // non-EI mapping breaks the handshake even on a hairpin-capable NAT
    p.tcp_hairpin = ei_map && c.hairpin && (!c.hairpin_filter || ei_fil);
    return p;
}

} // namespace holepunch
