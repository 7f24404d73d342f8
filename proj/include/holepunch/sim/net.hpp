//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "holepunch/natbox.hpp"
#include "holepunch/sim/event_loop.hpp"
#include "holepunch/sim/packet.hpp"

namespace holepunch::sim {

struct LinkOpts {
    SimTime latency = 10_ms;
    double loss_rate = 0.0;
    int drop_first = 0;  // deterministically drop the first N packets entering the link
};

class TraceLog {
public:
    void add(SimTime t, const std::string& text) {
        std::ostringstream line;
        line << "t=" << t << " " << text;
        lines_.push_back(line.str());
    }
    const std::vector<std::string>& lines() const { return lines_; }
    std::string str() const {
        std::string out;
        for (const auto& l : lines_) {
            out += l;
            out += '\n';
        }
        return out;
    }

private:
    std::vector<std::string> lines_;
};

class SimNet;
class Host;

// ---------------------------------------------------------------------------
// TCP connection handle.
//
// Simplified machine: CLOSED / SYN_SENT / SYN_RCVD / ESTABLISHED, SYN
// retransmission, RST teardown. Simultaneous open works the RFC 793 way:
// a SYN arriving while in SYN_SENT elicits a SYN-ACK, and a SYN-ACK in
// either SYN state establishes. When an inbound SYN's session key matches
// an outstanding outbound attempt, the outgoing handle wins and the
// listener never sees the stream.
// ---------------------------------------------------------------------------

struct TcpOpenOpts {
    SimTime retry_interval = 1_s;
    int max_tries = 4;
};

class TcpConn : public std::enable_shared_from_this<TcpConn> {
public:
    enum class State { syn_sent, syn_rcvd, established, failed, closed };
    enum class FailReason { reset, timeout, unreachable };

    std::function<void()> on_established;
    std::function<void(FailReason)> on_failed;
    std::function<void(const std::string&)> on_data;
    std::function<void()> on_closed;

    const SessionKey& key() const { return key_; }
    State state() const { return state_; }
    bool via_listener() const { return via_listener_; }

    void send(const std::string& payload);
    /// Abortive close: tells the peer (and any NATs watching) via RST.
    void close();
    /// Silent local cancellation; nothing further hits the wire.
    void abort();

private:
    friend class Host;
    Host* host_ = nullptr;
    SessionKey key_;
    State state_ = State::syn_sent;
    bool via_listener_ = false;
    int tries_left_ = 0;
    TcpOpenOpts opts_;
    EventLoop::EventHandle retry_timer_{};
    bool retry_armed_ = false;
};

using TcpConnPtr = std::shared_ptr<TcpConn>;

struct Realm {
    std::string id;
    std::map<uint32_t, Host*> hosts;
    std::map<uint32_t, class NatNode*> nats_here;  // NATs whose public side faces this realm
    class NatNode* gateway = nullptr;              // NAT whose private side is this realm
};

class NatNode {
public:
    NatNode(SimNet& net, std::string name, std::string inner, std::string outer,
            NatConfig config, LinkOpts link);

    const std::string& name() const { return name_; }
    const std::string& inner_realm() const { return inner_; }
    const std::string& outer_realm() const { return outer_; }
    NatBox& box() { return box_; }
    LinkOpts& link() { return link_; }

    void from_private(Packet pkt);
    void from_public(Packet pkt);

private:
    SimNet& net_;
    std::string name_, inner_, outer_;
    NatBox box_;
    LinkOpts link_;
    int link_drops_ = 0;
    friend class SimNet;
};

class Host {
public:
    Host(SimNet& net, std::string name, std::string realm, uint32_t addr, LinkOpts link)
        : net_(net), name_(std::move(name)), realm_(std::move(realm)), addr_(addr), link_(link) {}

    const std::string& name() const { return name_; }
    const std::string& realm() const { return realm_; }
    uint32_t addr() const { return addr_; }
    LinkOpts& link() { return link_; }

    Endpoint udp_endpoint(uint16_t port) const { return {addr_, port, Transport::udp}; }
    Endpoint tcp_endpoint(uint16_t port) const { return {addr_, port, Transport::tcp}; }

    using UdpHandler = std::function<void(const Packet&)>;

    void bind_udp(uint16_t port, UdpHandler handler) {
        if (udp_sockets_.count(port))
            throw std::runtime_error(name_ + ": UDP port " + std::to_string(port) + " already bound");
        udp_sockets_[port] = std::move(handler);
    }
    void unbind_udp(uint16_t port) { udp_sockets_.erase(port); }
    bool udp_bound(uint16_t port) const { return udp_sockets_.count(port) > 0; }

    void send_udp(uint16_t local_port, const Endpoint& dst, std::string payload) {
        if (!udp_sockets_.count(local_port))
            throw std::runtime_error(name_ + ": send from unbound UDP port " +
                                     std::to_string(local_port));
        Packet pkt;
        pkt.src = udp_endpoint(local_port);
        pkt.dst = dst;
        pkt.transport = Transport::udp;
        pkt.payload = std::move(payload);
        transmit(pkt);
    }

    TcpConnPtr tcp_open(uint16_t local_port, const Endpoint& remote, TcpOpenOpts opts = {});

    void tcp_listen(uint16_t port, std::function<void(TcpConnPtr)> accept_cb) {
        if (listeners_.count(port))
            throw std::runtime_error(name_ + ": TCP port " + std::to_string(port) +
                                     " already listening");
        listeners_[port] = std::move(accept_cb);
    }
    void tcp_unlisten(uint16_t port) { listeners_.erase(port); }

    void receive(const Packet& pkt);

private:
    friend class TcpConn;
    void transmit(Packet pkt);
    void handle_tcp(const Packet& pkt);
    void send_tcp(const SessionKey& key, uint8_t flags, std::string payload = "");
    void establish(const TcpConnPtr& conn);
    void fail_conn(const TcpConnPtr& conn, TcpConn::FailReason reason);
    void drop_conn(TcpConn* conn);
    void arm_retry(const TcpConnPtr& conn);

    SimNet& net_;
    std::string name_;
    std::string realm_;
    uint32_t addr_;
    LinkOpts link_;
    int link_drops_ = 0;
    std::map<uint16_t, UdpHandler> udp_sockets_;
    std::map<uint16_t, std::function<void(TcpConnPtr)>> listeners_;
    std::map<SessionKey, TcpConnPtr> conns_;
};

// ---------------------------------------------------------------------------
// The network itself: realms, routing, links, trace, one deterministic
// event loop. Single-threaded by contract; everything runs inside run_until.
// ---------------------------------------------------------------------------

class SimNet {
public:
    explicit SimNet(uint64_t seed = 0) : rng_(seed) {}

    EventLoop& loop() { return loop_; }
    SimTime now() const { return loop_.now(); }
    std::mt19937_64& rng() { return rng_; }
    TraceLog& trace() { return trace_; }

    size_t run_until(SimTime t) { return loop_.run_until(t); }
    size_t run_all() { return loop_.run_all(); }

    Realm& add_realm(const std::string& id) {
        auto [it, inserted] = realms_.try_emplace(id);
        it->second.id = id;
        return it->second;
    }

    Host& add_host(const std::string& name, const std::string& realm, const std::string& addr,
                   LinkOpts link = {}) {
        Realm& r = realm_ref(realm);
        auto host = std::make_unique<Host>(*this, name, realm, parse_address(addr), link);
        Host* p = host.get();
        if (r.hosts.count(p->addr()))
            throw std::runtime_error("duplicate address " + addr + " in realm " + realm);
        r.hosts[p->addr()] = p;
        hosts_by_name_[name] = p;
        hosts_.push_back(std::move(host));
        return *p;
    }

    NatNode& add_nat(const std::string& name, const std::string& inner, const std::string& outer,
                     const std::string& public_addr, NatConfig config, LinkOpts link = {}) {
        config.public_address = parse_address(public_addr);
        auto nat = std::make_unique<NatNode>(*this, name, inner, outer, config, link);
        NatNode* p = nat.get();
        realm_ref(outer).nats_here[config.public_address] = p;
        Realm& in = realm_ref(inner);
        if (in.gateway) throw std::runtime_error("realm " + inner + " already has a gateway NAT");
        in.gateway = p;
        nats_by_name_[name] = p;
        nats_.push_back(std::move(nat));
        return *p;
    }

    Host& host(const std::string& name) {
        auto it = hosts_by_name_.find(name);
        if (it == hosts_by_name_.end()) throw std::runtime_error("unknown host " + name);
        return *it->second;
    }
    NatNode& nat(const std::string& name) {
        auto it = nats_by_name_.find(name);
        if (it == nats_by_name_.end()) throw std::runtime_error("unknown NAT " + name);
        return *it->second;
    }

    /// Puts a packet onto a link; it reaches realm routing after the link
    /// latency unless the link loses it.
    void emit(const std::string& realm, Packet pkt, LinkOpts& link, int& drop_counter) {
        if (link.drop_first > 0 && drop_counter < link.drop_first) {
            ++drop_counter;
            trace_.add(now(), "loss realm=" + realm + " " + summarize(pkt));
            return;
        }
        if (link.loss_rate > 0.0 &&
            std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < link.loss_rate) {
            trace_.add(now(), "loss realm=" + realm + " " + summarize(pkt));
            return;
        }
        loop_.schedule(link.latency, [this, realm, pkt = std::move(pkt)] { deliver(realm, pkt); });
    }

    void deliver(const std::string& realm, const Packet& pkt) {
        Realm& r = realm_ref(realm);
        if (auto it = r.hosts.find(pkt.dst.addr); it != r.hosts.end()) {
            trace_.add(now(), "deliver realm=" + realm + " host=" + it->second->name() + " " +
                                  summarize(pkt));
            it->second->receive(pkt);
            return;
        }
        if (auto it = r.nats_here.find(pkt.dst.addr); it != r.nats_here.end()) {
            it->second->from_public(pkt);
            return;
        }
        if (r.gateway) {
            r.gateway->from_private(pkt);
            return;
        }
        trace_.add(now(), "drop realm=" + realm + " no-route " + summarize(pkt));
    }

private:
    Realm& realm_ref(const std::string& id) {
        auto it = realms_.find(id);
        if (it == realms_.end()) throw std::runtime_error("unknown realm " + id);
        return it->second;
    }

    EventLoop loop_;
    std::mt19937_64 rng_;
    TraceLog trace_;
    std::map<std::string, Realm> realms_;
    std::vector<std::unique_ptr<Host>> hosts_;
    std::vector<std::unique_ptr<NatNode>> nats_;
    std::map<std::string, Host*> hosts_by_name_;
    std::map<std::string, NatNode*> nats_by_name_;
};

// ---------------------------------------------------------------------------
// NatNode
// ---------------------------------------------------------------------------

inline NatNode::NatNode(SimNet& net, std::string name, std::string inner, std::string outer,
                        NatConfig config, LinkOpts link)
    : net_(net), name_(std::move(name)), inner_(std::move(inner)), outer_(std::move(outer)),
      box_(config), link_(link) {
    box_.on_decision = [this](const std::string& what) {
        net_.trace().add(net_.now(), "nat=" + name_ + " " + what);
    };
}

inline void NatNode::from_private(Packet pkt) {
    if (pkt.dst.addr == box_.config().public_address) {
        if (auto looped = box_.hairpin_translate(std::move(pkt), net_.now()))
            net_.emit(inner_, std::move(*looped), link_, link_drops_);
        return;
    }
    if (auto translated = box_.translate_outbound(std::move(pkt), net_.now()))
        net_.emit(outer_, std::move(*translated), link_, link_drops_);
}

inline void NatNode::from_public(Packet pkt) {
    InboundResult result = box_.translate_inbound(std::move(pkt), net_.now());
    if (auto* fwd = std::get_if<Packet>(&result)) {
        net_.emit(inner_, std::move(*fwd), link_, link_drops_);
    } else if (auto* rst = std::get_if<InboundRst>(&result)) {
        net_.emit(outer_, std::move(rst->rst), link_, link_drops_);
    }
    // InboundDrop: the box already traced the reason
}

// ---------------------------------------------------------------------------
// Host TCP machinery
// ---------------------------------------------------------------------------

inline void Host::transmit(Packet pkt) { net_.emit(realm_, std::move(pkt), link_, link_drops_); }

inline TcpConnPtr Host::tcp_open(uint16_t local_port, const Endpoint& remote, TcpOpenOpts opts) {
    SessionKey key{tcp_endpoint(local_port), remote};
    if (conns_.count(key))
        throw std::runtime_error(name_ + ": address in use: " + format(key.local) + " -> " +
                                 format(key.remote));
    auto conn = std::make_shared<TcpConn>();
    conn->host_ = this;
    conn->key_ = key;
    conn->state_ = TcpConn::State::syn_sent;
    conn->opts_ = opts;
    conn->tries_left_ = opts.max_tries - 1;
    conns_[key] = conn;
    send_tcp(key, tcp_syn);
    arm_retry(conn);
    return conn;
}

inline void Host::arm_retry(const TcpConnPtr& conn) {
    std::weak_ptr<TcpConn> weak = conn;
    conn->retry_armed_ = true;
    conn->retry_timer_ = net_.loop().schedule(conn->opts_.retry_interval, [this, weak] {
        auto c = weak.lock();
        if (!c || c->state_ != TcpConn::State::syn_sent) return;
        if (c->tries_left_ <= 0) {
            fail_conn(c, TcpConn::FailReason::timeout);
            return;
        }
        --c->tries_left_;
        send_tcp(c->key_, tcp_syn);
        arm_retry(c);
    });
}

inline void Host::send_tcp(const SessionKey& key, uint8_t flags, std::string payload) {
    Packet pkt;
    pkt.src = key.local;
    pkt.dst = key.remote;
    pkt.transport = Transport::tcp;
    pkt.tcp_flags = flags;
    pkt.payload = std::move(payload);
    transmit(pkt);
}

inline void Host::receive(const Packet& pkt) {
    if (pkt.transport == Transport::udp) {
        if (auto it = udp_sockets_.find(pkt.dst.port); it != udp_sockets_.end())
            it->second(pkt);
        else
            net_.trace().add(net_.now(), "drop host=" + name_ + " no-udp-listener " + summarize(pkt));
        return;
    }
    handle_tcp(pkt);
}

inline void Host::establish(const TcpConnPtr& conn) {
    conn->state_ = TcpConn::State::established;
    if (conn->retry_armed_) {
        net_.loop().cancel(conn->retry_timer_);
        conn->retry_armed_ = false;
    }
    net_.trace().add(net_.now(), "tcp host=" + name_ + " established " + format(conn->key_.local) +
                                     " <-> " + format(conn->key_.remote) +
                                     (conn->via_listener_ ? " (accept)" : " (connect)"));
    if (conn->via_listener_) {
        if (auto it = listeners_.find(conn->key_.local.port); it != listeners_.end()) {
            it->second(conn);
            return;
        }
    }
    if (conn->on_established) conn->on_established();
}

inline void Host::fail_conn(const TcpConnPtr& conn, TcpConn::FailReason reason) {
    conn->state_ = TcpConn::State::failed;
    if (conn->retry_armed_) {
        net_.loop().cancel(conn->retry_timer_);
        conn->retry_armed_ = false;
    }
    conns_.erase(conn->key_);
    if (conn->on_failed) conn->on_failed(reason);
}

inline void Host::drop_conn(TcpConn* conn) {
    if (conn->retry_armed_) {
        net_.loop().cancel(conn->retry_timer_);
        conn->retry_armed_ = false;
    }
    conns_.erase(conn->key_);
}

inline void Host::handle_tcp(const Packet& pkt) {
    SessionKey key{pkt.dst, pkt.src};
    auto it = conns_.find(key);
    TcpConnPtr conn = it != conns_.end() ? it->second : nullptr;

    if (pkt.has(tcp_rst)) {
        if (!conn) return;  // never answer a RST
        if (conn->state_ == TcpConn::State::established) {
            conn->state_ = TcpConn::State::closed;
            drop_conn(conn.get());
            if (conn->on_closed) conn->on_closed();
        } else {
            fail_conn(conn, TcpConn::FailReason::reset);
        }
        return;
    }

    if (pkt.is(tcp_syn)) {
        if (conn) {
            if (conn->state_ == TcpConn::State::syn_sent) {
                // SYNs crossed on the wire: simultaneous open
                conn->state_ = TcpConn::State::syn_rcvd;
                send_tcp(key, tcp_syn | tcp_ack);
            } else if (conn->state_ != TcpConn::State::closed) {
                // duplicate SYN; replay our SYN-ACK so a lost one can recover
                if (conn->state_ == TcpConn::State::syn_rcvd) send_tcp(key, tcp_syn | tcp_ack);
            }
            return;
        }
        if (listeners_.count(pkt.dst.port)) {
            auto fresh = std::make_shared<TcpConn>();
            fresh->host_ = this;
            fresh->key_ = key;
            fresh->state_ = TcpConn::State::syn_rcvd;
            fresh->via_listener_ = true;
            conns_[key] = fresh;
            send_tcp(key, tcp_syn | tcp_ack);
            return;
        }
        send_tcp(key, tcp_rst);
        return;
    }

    if (pkt.has(tcp_syn) && pkt.has(tcp_ack)) {
        if (!conn) {
            send_tcp(key, tcp_rst);
            return;
        }
        if (conn->state_ == TcpConn::State::syn_sent || conn->state_ == TcpConn::State::syn_rcvd) {
            send_tcp(key, tcp_ack);
            establish(conn);
        }
        return;
    }

    // plain ACK, possibly carrying data
    if (!conn) {
        send_tcp(key, tcp_rst);
        return;
    }
    if (conn->state_ == TcpConn::State::syn_rcvd) establish(conn);
    if (conn->state_ == TcpConn::State::established && !pkt.payload.empty() && conn->on_data)
        conn->on_data(pkt.payload);
}

inline void TcpConn::send(const std::string& payload) {
    if (state_ != State::established)
        throw std::runtime_error("send on non-established connection");
    host_->send_tcp(key_, tcp_ack, payload);
}

inline void TcpConn::close() {
    if (state_ == State::established || state_ == State::syn_sent || state_ == State::syn_rcvd)
        host_->send_tcp(key_, tcp_rst);
    state_ = State::closed;
    host_->drop_conn(this);
}

inline void TcpConn::abort() {
    state_ = State::closed;
    host_->drop_conn(this);
}

} // namespace holepunch::sim
