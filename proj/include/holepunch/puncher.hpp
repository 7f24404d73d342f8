//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "holepunch/message.hpp"
#include "holepunch/rendezvous.hpp"
#include "holepunch/sim/net.hpp"

namespace holepunch {

/// Which route the punched session ended up on.
enum class PunchPath : uint8_t { public_route, private_route, hairpin, relay, reversal };

inline const char* to_string(PunchPath p) {
    switch (p) {
    case PunchPath::public_route: return "PUBLIC";
    case PunchPath::private_route: return "PRIVATE";
    case PunchPath::hairpin: return "HAIRPIN";
    case PunchPath::relay: return "RELAY";
    case PunchPath::reversal: return "REVERSAL";
    }
    return "?";
}

struct PunchOpts {
    sim::SimTime hello_interval = sim::operator""_ms(500ull);
    sim::SimTime deadline = sim::operator""_s(30ull);
    sim::SimTime keepalive_interval = sim::operator""_s(15ull);
    int keepalive_misses = 3;
    // sequential TCP: how long the target lets its doomed connect linger
    sim::SimTime doomed_wait = sim::operator""_s(2ull);
    sim::SimTime tcp_retry_backoff = sim::operator""_ms(500ull);
    sim::TcpOpenOpts tcp{};
};

struct PunchOutcome {
    bool success = false;
    PunchPath path = PunchPath::public_route;
    Endpoint remote{};   // the endpoint the session locked onto
    sim::SimTime elapsed = 0;
    int hellos_sent = 0;
    int retries_used = 0;  // TCP: connect attempts restarted after a reset
    std::string detail;
};

/// One peer-to-peer client. Owns the punch socket state on its host and
/// drives the whole exchange: registration, hole punching over UDP and TCP,
/// the sequential TCP variant, connection reversal, keep-alives, and relayed
/// messages. All progress is reported through on_result, which fires on
/// requester and target alike.
class PunchClient {
public:
    using ResultCb = std::function<void(const PeerId&, const PunchOutcome&)>;
    ResultCb on_result;
    std::function<void(const PeerId&, const std::string&)> on_relay_data;
    std::function<void(const PeerId&, const std::string&)> on_peer_data;
    std::function<void(const PeerId&)> on_repunch;

    PunchClient(sim::SimNet& net, sim::Host& host, PeerId id, Endpoint server_udp,
                Endpoint server_tcp, PunchOpts opts = {})
        : net_(net), host_(host), id_(std::move(id)), server_udp_(server_udp),
          server_tcp_(server_tcp), opts_(opts) {}

    const PeerId& id() const { return id_; }
    std::optional<Endpoint> udp_public() const { return udp_public_; }
    std::optional<Endpoint> tcp_public() const { return tcp_public_; }

    // -- UDP ----------------------------------------------------------------

    void register_udp(uint16_t port) {
        if (!udp_bound_) {
            udp_port_ = port;
            host_.bind_udp(port, [this](const sim::Packet& pkt) { on_udp(pkt); });
            udp_bound_ = true;
        }
        send_to_server(RegisterMsg{id_, host_.udp_endpoint(udp_port_)});
    }

    void punch_udp(const PeerId& peer) {
        pending_udp_.insert(peer);
        send_to_server(ConnectMsg{id_, peer, Nonce{}});
    }

    /// Probes the server's observer port to estimate the NAT's port stride,
    /// then punches with the predicted endpoint attached to the request.
    void punch_udp_predictive(const PeerId& peer, uint16_t observer_port) {
        probe_ = Probe{};
        probe_->peer = peer;
        probe_->targets = {server_udp_, Endpoint{server_udp_.addr, observer_port, Transport::udp}};
        for (const auto& t : probe_->targets)
            host_.send_udp(udp_port_, t, encode_message(RegisterMsg{id_, host_.udp_endpoint(udp_port_)}));
    }

    void enable_keepalive(bool on) { keepalive_on_ = on; }

    /// Datagram to a peer over an already punched UDP session.
    void session_send(const PeerId& peer, const std::string& payload) {
        auto it = udp_sessions_.find(peer);
        if (it == udp_sessions_.end() || !it->second.locked)
            throw std::runtime_error(id_ + ": no punched session with " + peer);
        host_.send_udp(udp_port_, *it->second.locked, payload);
    }

    /// Re-registers and punches again; used after a NAT dropped the session.
    void repunch_udp(const PeerId& peer) {
        udp_sessions_.erase(peer);
        register_udp(udp_port_);
        punch_udp(peer);
        if (on_repunch) on_repunch(peer);
    }

    void relay_send(const PeerId& peer, const std::string& payload) {
        send_to_server(RelayMsg{peer, payload});
    }

    // -- TCP ----------------------------------------------------------------

    void register_tcp(uint16_t port) {
        tcp_port_ = port;
        host_.tcp_listen(port, [this](sim::TcpConnPtr conn) { on_tcp_accept(conn); });
        open_server_conn();
    }

    void punch_tcp(const PeerId& peer, bool sequential = false) {
        pending_tcp_.insert(peer);
        send_over_server_conn(ConnectMsg{id_, peer, Nonce{}, sequential});
    }

    void request_reversal(const PeerId& peer) {
        pending_tcp_.insert(peer);
        send_over_server_conn(ConnectMsg{id_, peer, Nonce{}, false, true});
    }

private:
    // -- UDP session state --------------------------------------------------

    struct UdpSession {
        PeerId peer;
        Nonce nonce;
        std::vector<Endpoint> candidates;
        Endpoint peer_public;
        Endpoint peer_private;
        bool initiator = false;
        bool done = false;
        std::optional<Endpoint> locked;
        sim::SimTime started = 0;
        int hellos_sent = 0;
        sim::EventLoop::EventHandle timer{};
        bool timer_armed = false;
        int misses = 0;
        bool ack_seen = false;
    };

    struct Probe {
        PeerId peer;
        std::vector<Endpoint> targets;                    // where pings went
        std::map<Endpoint, uint16_t> observed;            // target -> mapped port
    };

    void send_to_server(const ControlMessage& m) {
        host_.send_udp(udp_port_, server_udp_, encode_message(m));
    }

    void on_udp(const sim::Packet& pkt) {
        auto decoded = try_decode(pkt.payload, Transport::udp);
        if (!decoded) {
            deliver_peer_data(pkt);
            return;
        }
        if (auto* ok = std::get_if<RegisterOkMsg>(&*decoded)) {
            if (pkt.src == server_udp_) udp_public_ = ok->public_ep;
            if (probe_) note_probe(pkt.src, ok->public_ep);
        } else if (auto* fwd = std::get_if<ForwardMsg>(&*decoded)) {
            start_udp_session(*fwd);
        } else if (auto* hello = std::get_if<HelloMsg>(&*decoded)) {
            on_hello(pkt.src, *hello);
        } else if (auto* ack = std::get_if<HelloAckMsg>(&*decoded)) {
            on_hello_ack(pkt.src, *ack);
        } else if (auto* rel = std::get_if<RelayDeliverMsg>(&*decoded)) {
            if (on_relay_data) on_relay_data(rel->from, rel->payload);
        } else if (auto* err = std::get_if<ErrorMsg>(&*decoded)) {
            fail_pending_udp(err->reason);
        }
    }

    void deliver_peer_data(const sim::Packet& pkt) {
        for (auto& [peer, sess] : udp_sessions_)
            if (sess.locked && *sess.locked == pkt.src) {
                if (on_peer_data) on_peer_data(peer, pkt.payload);
                return;
            }
    }

    void note_probe(const Endpoint& from, const Endpoint& observed) {
        if (std::find(probe_->targets.begin(), probe_->targets.end(), from) ==
            probe_->targets.end())
            return;
        probe_->observed[from] = observed.port;
        if (probe_->observed.size() < probe_->targets.size()) return;
        // all probe answers in: predict and fire the real request
        std::vector<std::pair<Endpoint, uint16_t>> samples;
        for (const auto& t : probe_->targets) samples.emplace_back(t, probe_->observed.at(t));
        std::optional<Endpoint> predicted;
        if (auto port = predict_next_port(samples))
            predicted = Endpoint{observed.addr, *port, Transport::udp};
        pending_udp_.insert(probe_->peer);
        send_to_server(ConnectMsg{id_, probe_->peer, Nonce{}, false, false, predicted});
        probe_.reset();
    }

    void start_udp_session(const ForwardMsg& fwd) {
        UdpSession sess;
        sess.peer = fwd.peer;
        sess.nonce = fwd.nonce;
        sess.peer_public = fwd.public_ep;
        sess.peer_private = fwd.private_ep;
        // candidate order fixes which mapping a symmetric NAT burns first;
        // the predicted endpoint must come right after the public one
        sess.candidates = {fwd.public_ep};
        if (fwd.predicted) sess.candidates.push_back(*fwd.predicted);
        sess.candidates.push_back(fwd.private_ep);
        sess.initiator = pending_udp_.erase(fwd.peer) > 0;
        sess.started = net_.now();
        udp_sessions_.insert_or_assign(fwd.peer, std::move(sess));
        hello_tick(fwd.peer);
    }

    void hello_tick(const PeerId& peer) {
        auto it = udp_sessions_.find(peer);
        if (it == udp_sessions_.end()) return;
        UdpSession& sess = it->second;
        if (sess.done) return;
        if (net_.now() - sess.started >= opts_.deadline) {
            finish_udp(sess, false, "deadline");
            return;
        }
        for (const auto& cand : sess.candidates) {
            host_.send_udp(udp_port_, cand, encode_message(HelloMsg{id_, sess.nonce}));
            ++sess.hellos_sent;
        }
        sess.timer_armed = true;
        sess.timer = net_.loop().schedule(opts_.hello_interval, [this, peer] { hello_tick(peer); });
    }

    UdpSession* session_for(const PeerId& from, const Nonce& nonce, const Endpoint& src) {
        auto it = udp_sessions_.find(from);
        if (it == udp_sessions_.end()) return nullptr;
        UdpSession& sess = it->second;
        if (sess.nonce != nonce) return nullptr;
        // a peer behind a symmetric NAT shows up from a port nobody vouched
        // for; accepting it would fake success the real session can't have
        bool known = sess.locked == src ||
                     std::find(sess.candidates.begin(), sess.candidates.end(), src) !=
                         sess.candidates.end();
        return known ? &sess : nullptr;
    }

    void on_hello(const Endpoint& src, const HelloMsg& msg) {
        UdpSession* sess = session_for(msg.from, msg.nonce, src);
        if (!sess) return;
        host_.send_udp(udp_port_, src, encode_message(HelloAckMsg{id_, msg.nonce}));
        lock_udp(*sess, src);
    }

    void on_hello_ack(const Endpoint& src, const HelloAckMsg& msg) {
        UdpSession* sess = session_for(msg.from, msg.nonce, src);
        if (!sess) return;
        sess->ack_seen = true;
        lock_udp(*sess, src);
    }

    void lock_udp(UdpSession& sess, const Endpoint& src) {
        if (sess.done) return;
        sess.locked = src;
        finish_udp(sess, true, "");
    }

    void finish_udp(UdpSession& sess, bool success, const std::string& detail) {
        sess.done = true;
        if (sess.timer_armed) {
            net_.loop().cancel(sess.timer);
            sess.timer_armed = false;
        }
        PunchOutcome out;
        out.success = success;
        out.elapsed = net_.now() - sess.started;
        out.hellos_sent = sess.hellos_sent;
        out.detail = detail;
        if (success) {
            out.remote = *sess.locked;
            out.path = classify_path(*sess.locked, sess.peer_public, sess.peer_private,
                                     udp_public_);
            if (keepalive_on_) arm_keepalive(sess.peer);
        }
        if (on_result) on_result(sess.peer, out);
    }

    void fail_pending_udp(const std::string& reason) {
        if (pending_udp_.empty()) return;
        PeerId peer = *pending_udp_.begin();
        pending_udp_.erase(pending_udp_.begin());
        PunchOutcome out;
        out.detail = reason;
        if (on_result) on_result(peer, out);
    }

    PunchPath classify_path(const Endpoint& locked, const Endpoint& peer_public,
                            const Endpoint& peer_private,
                            const std::optional<Endpoint>& own_public) const {
        if (locked == peer_private) return PunchPath::private_route;
        if (locked == peer_public && own_public && own_public->addr == peer_public.addr)
            return PunchPath::hairpin;
        return PunchPath::public_route;
    }

    void arm_keepalive(const PeerId& peer) {
        net_.loop().schedule(opts_.keepalive_interval, [this, peer] { keepalive_tick(peer); });
    }

    void keepalive_tick(const PeerId& peer) {
        auto it = udp_sessions_.find(peer);
        if (it == udp_sessions_.end() || !it->second.locked || !keepalive_on_) return;
        UdpSession& sess = it->second;
        if (sess.ack_seen)
            sess.misses = 0;
        else
            ++sess.misses;
        sess.ack_seen = false;
        if (sess.misses >= opts_.keepalive_misses) {
            bool initiator = sess.initiator;
            net_.trace().add(net_.now(), "punch id=" + id_ + " keepalive lost session with " + peer);
            udp_sessions_.erase(it);
            register_udp(udp_port_);
            if (initiator) punch_udp(peer);
            if (on_repunch) on_repunch(peer);
            return;
        }
        host_.send_udp(udp_port_, *sess.locked, encode_message(HelloMsg{id_, sess.nonce}));
        arm_keepalive(peer);
    }

    // -- TCP session state --------------------------------------------------

    struct Framing {
        sim::TcpConnPtr conn;
        std::string buffer;
    };

    struct TcpSession {
        PeerId peer;
        Nonce nonce;
        std::vector<Endpoint> candidates;
        Endpoint peer_public;
        Endpoint peer_private;
        bool initiator = false;
        bool sequential = false;
        bool reversal = false;
        bool done = false;
        std::optional<Endpoint> locked;
        sim::TcpConnPtr stream;
        std::vector<sim::TcpConnPtr> attempts;
        sim::TcpConnPtr doomed;
        sim::SimTime started = 0;
        int retries_used = 0;
    };

    void open_server_conn() {
        server_conn_ = host_.tcp_open(tcp_port_, server_tcp_, opts_.tcp);
        auto framing = std::make_shared<Framing>();
        framing->conn = server_conn_;
        server_conn_->on_established = [this] {
            send_over_server_conn(RegisterMsg{id_, host_.tcp_endpoint(tcp_port_)});
            flush_server_queue();
        };
        server_conn_->on_data = [this, framing](const std::string& bytes) {
            each_line(*framing, bytes,
                      [this](const ControlMessage& m) { on_server_message(m); });
        };
        server_conn_->on_closed = [this] { on_server_conn_closed(); };
    }

    template <typename Fn>
    void each_line(Framing& framing, const std::string& bytes, Fn&& fn) {
        framing.buffer += bytes;
        size_t nl;
        while ((nl = framing.buffer.find('\n')) != std::string::npos) {
            std::string line = framing.buffer.substr(0, nl);
            framing.buffer.erase(0, nl + 1);
            if (auto msg = try_decode(line, Transport::tcp)) fn(*msg);
        }
    }

    void send_over_server_conn(const ControlMessage& m) {
        if (!server_conn_ || server_conn_->state() != sim::TcpConn::State::established) {
            server_queue_.push_back(encode_message(m) + "\n");
            return;
        }
        server_conn_->send(encode_message(m) + "\n");
    }

    void flush_server_queue() {
        for (auto& line : server_queue_) server_conn_->send(line);
        server_queue_.clear();
    }

    void on_server_message(const ControlMessage& msg) {
        if (auto* ok = std::get_if<RegisterOkMsg>(&msg)) {
            tcp_public_ = ok->public_ep;
        } else if (auto* fwd = std::get_if<ForwardMsg>(&msg)) {
            start_tcp_session(*fwd);
        } else if (auto* rel = std::get_if<RelayDeliverMsg>(&msg)) {
            if (on_relay_data) on_relay_data(rel->from, rel->payload);
        } else if (auto* err = std::get_if<ErrorMsg>(&msg)) {
            fail_pending_tcp(err->reason);
        }
    }

    void start_tcp_session(const ForwardMsg& fwd) {
        auto sess = std::make_shared<TcpSession>();
        sess->peer = fwd.peer;
        sess->nonce = fwd.nonce;
        sess->peer_public = fwd.public_ep;
        sess->peer_private = fwd.private_ep;
        sess->candidates = {fwd.public_ep};
        if (fwd.predicted) sess->candidates.push_back(*fwd.predicted);
        sess->candidates.push_back(fwd.private_ep);
        sess->initiator = pending_tcp_.erase(fwd.peer) > 0;
        sess->sequential = fwd.sequential;
        sess->reversal = fwd.reversal || fwd.direct;
        sess->started = net_.now();
        tcp_sessions_[fwd.peer] = sess;
        net_.loop().schedule(opts_.deadline, [this, sess] {
            if (!sess->done) finish_tcp(*sess, false, "deadline");
        });

        if (fwd.direct) return;  // un-NATted side of a reversal: just wait
        if (fwd.reversal) {
            open_attempt(sess, sess->peer_public);
            return;
        }
        if (fwd.sequential) {
            if (sess->initiator) return;  // wait for the server to drop us
            run_doomed_connect(sess);
            return;
        }
        for (const auto& cand : sess->candidates) open_attempt(sess, cand);
    }

    /// Sequential variant, target side: a throwaway connect to the peer's
    /// public endpoint opens our NAT's hole, then we hand the initiative
    /// back by closing the server session and start listening instead.
    void run_doomed_connect(const std::shared_ptr<TcpSession>& sess) {
        sess->doomed = host_.tcp_open(tcp_port_, sess->peer_public, opts_.tcp);
        sess->doomed->on_failed = [](sim::TcpConn::FailReason) { /* expected */ };
        net_.loop().schedule(opts_.doomed_wait, [this, sess] {
            if (sess->done) return;
            if (sess->doomed) sess->doomed->abort();  // silent: keep the hole
            if (server_conn_) server_conn_->close();
        });
    }

    void on_server_conn_closed() {
        server_conn_.reset();
        // sequential variant, requester side: the drop is the go signal
        for (auto& [peer, sess] : tcp_sessions_)
            if (sess->sequential && sess->initiator && !sess->done)
                for (const auto& cand : sess->candidates) open_attempt(sess, cand);
    }

    void open_attempt(const std::shared_ptr<TcpSession>& sess, const Endpoint& remote) {
        if (sess->done) return;
        auto conn = host_.tcp_open(tcp_port_, remote, opts_.tcp);
        sess->attempts.push_back(conn);
        auto framing = std::make_shared<Framing>();
        framing->conn = conn;
        conn->on_established = [this, sess, conn] {
            conn->send(encode_message(HelloMsg{id_, sess->nonce}) + "\n");
        };
        conn->on_data = [this, sess, conn, framing](const std::string& bytes) {
            each_line(*framing, bytes,
                      [&](const ControlMessage& m) { on_stream_message(sess, conn, m); });
        };
        conn->on_failed = [this, sess, remote](sim::TcpConn::FailReason reason) {
            if (sess->done) return;
            if (reason != sim::TcpConn::FailReason::reset) return;
            // a NAT answered with RST; back off briefly and try again
            ++sess->retries_used;
            net_.loop().schedule(opts_.tcp_retry_backoff, [this, sess, remote] {
                if (!sess->done) open_attempt(sess, remote);
            });
        };
    }

    void on_tcp_accept(sim::TcpConnPtr conn) {
        auto framing = std::make_shared<Framing>();
        framing->conn = conn;
        conn->on_data = [this, conn, framing](const std::string& bytes) {
            each_line(*framing, bytes, [&](const ControlMessage& m) {
                on_accepted_message(conn, m);
            });
        };
    }

    void on_accepted_message(const sim::TcpConnPtr& conn, const ControlMessage& msg) {
        auto* hello = std::get_if<HelloMsg>(&msg);
        if (!hello) return;
        auto it = tcp_sessions_.find(hello->from);
        if (it == tcp_sessions_.end()) {
            conn->close();
            return;
        }
        on_stream_message(it->second, conn, msg);
    }

    void on_stream_message(const std::shared_ptr<TcpSession>& sess, const sim::TcpConnPtr& conn,
                           const ControlMessage& msg) {
        const Endpoint& remote = conn->key().remote;
        if (auto* hello = std::get_if<HelloMsg>(&msg)) {
            if (!validate_stream(*sess, hello->from, hello->nonce, remote)) {
                conn->close();
                return;
            }
            conn->send(encode_message(HelloAckMsg{id_, sess->nonce}) + "\n");
            lock_tcp(sess, conn);
        } else if (auto* ack = std::get_if<HelloAckMsg>(&msg)) {
            if (!validate_stream(*sess, ack->from, ack->nonce, remote)) return;
            lock_tcp(sess, conn);
        } else if (auto* data = std::get_if<RelayDeliverMsg>(&msg)) {
            if (on_peer_data) on_peer_data(sess->peer, data->payload);
        }
    }

    bool validate_stream(const TcpSession& sess, const PeerId& from, const Nonce& nonce,
                         const Endpoint& remote) const {
        if (from != sess.peer || nonce != sess.nonce) return false;
        if (sess.locked == remote) return true;
        // reversal accepts from wherever the NATted peer emerges
        if (sess.reversal) return true;
        return std::find(sess.candidates.begin(), sess.candidates.end(), remote) !=
               sess.candidates.end();
    }

    void lock_tcp(const std::shared_ptr<TcpSession>& sess, const sim::TcpConnPtr& conn) {
        if (sess->done) return;
        sess->locked = conn->key().remote;
        sess->stream = conn;
        for (auto& a : sess->attempts)
            if (a != conn && a->state() != sim::TcpConn::State::established) a->abort();
        finish_tcp(*sess, true, "");
    }

    void finish_tcp(TcpSession& sess, bool success, const std::string& detail) {
        sess.done = true;
        PunchOutcome out;
        out.success = success;
        out.elapsed = net_.now() - sess.started;
        out.retries_used = sess.retries_used;
        out.detail = detail;
        if (success) {
            out.remote = *sess.locked;
            out.path = sess.reversal
                           ? PunchPath::reversal
                           : classify_path(*sess.locked, sess.peer_public, sess.peer_private,
                                           tcp_public_);
        } else {
            for (auto& a : sess.attempts) a->abort();
        }
        if (on_result) on_result(sess.peer, out);
    }

    void fail_pending_tcp(const std::string& reason) {
        if (pending_tcp_.empty()) return;
        PeerId peer = *pending_tcp_.begin();
        pending_tcp_.erase(pending_tcp_.begin());
        PunchOutcome out;
        out.detail = reason;
        if (on_result) on_result(peer, out);
    }

    sim::SimNet& net_;
    sim::Host& host_;
    PeerId id_;
    Endpoint server_udp_;
    Endpoint server_tcp_;
    PunchOpts opts_;

    bool udp_bound_ = false;
    uint16_t udp_port_ = 0;
    std::optional<Endpoint> udp_public_;
    std::set<PeerId> pending_udp_;
    std::map<PeerId, UdpSession> udp_sessions_;
    std::optional<Probe> probe_;
    bool keepalive_on_ = false;

    uint16_t tcp_port_ = 0;
    std::optional<Endpoint> tcp_public_;
    sim::TcpConnPtr server_conn_;
    std::vector<std::string> server_queue_;
    std::set<PeerId> pending_tcp_;
    std::map<PeerId, std::shared_ptr<TcpSession>> tcp_sessions_;
};

} // namespace holepunch
