//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>

#include "holepunch/message.hpp"
#include "holepunch/sim/net.hpp"

namespace holepunch {

/// Per-client registration state. The public endpoint always comes from
/// observed packet headers, never from the payload; the private endpoint is
/// whatever the client reported (de-obfuscated by the codec).
struct RendezvousRecord {
    PeerId id;
    Endpoint private_ep;
    Endpoint public_ep;
    sim::SimTime last_seen = 0;

    bool behind_nat() const { return private_ep != public_ep; }
};

/// The well-known server S. One registration table per transport; UDP and
/// TCP run the same protocol independently. Handlers are pure
/// request->response state transitions; the sim wiring below feeds them.
class RendezvousServer {
public:
    static constexpr sim::SimTime default_staleness = sim::operator""_s(300ull);

    RendezvousServer(sim::SimNet& net, sim::Host& host, uint16_t udp_port = 1234,
                     uint16_t tcp_port = 1234, sim::SimTime staleness = default_staleness)
        : net_(net), host_(host), udp_port_(udp_port), tcp_port_(tcp_port), staleness_(staleness) {
        host_.bind_udp(udp_port_, [this](const sim::Packet& pkt) { on_udp(pkt); });
        host_.tcp_listen(tcp_port_, [this](sim::TcpConnPtr conn) { on_tcp_accept(conn); });
    }

    Endpoint udp_endpoint() const { return host_.udp_endpoint(udp_port_); }
    Endpoint tcp_endpoint() const { return host_.tcp_endpoint(tcp_port_); }

    /// Extra port that only mirrors back the observed source endpoint.
    /// Clients probing their NAT's port allocation ping it alongside the
    /// main port; nothing lands in the registration table.
    void add_udp_observer(uint16_t port) {
        host_.bind_udp(port, [this, port](const sim::Packet& pkt) {
            auto decoded = try_decode(pkt.payload, Transport::udp);
            if (decoded && std::holds_alternative<RegisterMsg>(*decoded))
                host_.send_udp(port, pkt.src, encode_message(RegisterOkMsg{pkt.src}));
        });
    }

    // -- core operations (also used directly by unit tests) -----------------

    RegisterOkMsg handle_register(const RegisterMsg& msg, const Endpoint& observed_src) {
        auto& table = records(observed_src.transport);
        table[msg.id] = RendezvousRecord{msg.id, msg.private_ep, observed_src, net_.now()};
        return RegisterOkMsg{observed_src};
    }

    /// Mirrored FORWARDs carrying the same server-issued nonce, or an error
    /// naming why the request cannot be served.
    std::variant<std::pair<ForwardMsg, ForwardMsg>, ErrorMsg>
    handle_connect(const ConnectMsg& msg, Transport transport) {
        auto* requester = lookup(msg.id, transport);
        if (!requester) return ErrorMsg{"unknown peer: " + msg.id};
        auto* target = lookup(msg.peer, transport);
        if (!target) return ErrorMsg{"unknown peer: " + msg.peer};
        Nonce nonce = Nonce::generate(net_.rng());
        ForwardMsg to_requester{target->id, target->public_ep, target->private_ep, nonce,
                                msg.sequential};
        ForwardMsg to_target{requester->id, requester->public_ep, requester->private_ep, nonce,
                             msg.sequential};
        to_target.predicted = msg.predicted;
        if (msg.reversal) {
            if (!target->behind_nat()) {
                to_requester.reversal = true;  // plain outbound connect will work
                to_target.direct = true;
            } else if (!requester->behind_nat()) {
                to_requester.direct = true;
                to_target.reversal = true;
            } else {
                return ErrorMsg{"reversal not applicable: both peers behind NATs"};
            }
        }
        return std::pair{to_requester, to_target};
    }

    std::variant<std::pair<PeerId, RelayDeliverMsg>, ErrorMsg>
    relay(const RelayMsg& msg, const PeerId& from, Transport transport) {
        auto* target = lookup(msg.to, transport);
        if (!target) return ErrorMsg{"unknown peer: " + msg.to};
        return std::pair{target->id, RelayDeliverMsg{from, msg.payload}};
    }

    const RendezvousRecord* find_record(const PeerId& id, Transport transport) const {
        auto& table = transport == Transport::udp ? udp_records_ : tcp_records_;
        auto it = table.find(id);
        return it == table.end() ? nullptr : &it->second;
    }

private:
    std::map<PeerId, RendezvousRecord>& records(Transport t) {
        return t == Transport::udp ? udp_records_ : tcp_records_;
    }

    RendezvousRecord* lookup(const PeerId& id, Transport transport) {
        auto& table = records(transport);
        auto it = table.find(id);
        if (it == table.end()) return nullptr;
        if (net_.now() - it->second.last_seen > staleness_) return nullptr;  // stale record
        return &it->second;
    }

    // -- UDP wiring ---------------------------------------------------------

    void on_udp(const sim::Packet& pkt) {
        auto decoded = try_decode(pkt.payload, Transport::udp);
        if (!decoded) return;
        Endpoint observed = pkt.src;
        auto send = [this, observed](const ControlMessage& m) {
            host_.send_udp(udp_port_, observed, encode_message(m));
        };
        if (auto* reg = std::get_if<RegisterMsg>(&*decoded)) {
            send(handle_register(*reg, observed));
        } else if (auto* con = std::get_if<ConnectMsg>(&*decoded)) {
            auto result = handle_connect(*con, Transport::udp);
            if (auto* err = std::get_if<ErrorMsg>(&result)) {
                send(*err);
            } else {
                auto& [to_requester, to_target] = std::get<0>(result);
                send(to_requester);
                auto* target = lookup(to_requester.peer, Transport::udp);
                host_.send_udp(udp_port_, target->public_ep, encode_message(to_target));
            }
        } else if (auto* rel = std::get_if<RelayMsg>(&*decoded)) {
            auto from = identify_udp(observed);
            if (!from) {
                send(ErrorMsg{"relay from unregistered endpoint"});
                return;
            }
            auto result = relay(*rel, *from, Transport::udp);
            if (auto* err = std::get_if<ErrorMsg>(&result)) {
                send(*err);
            } else {
                auto& [to_id, deliver] = std::get<0>(result);
                auto* target = lookup(to_id, Transport::udp);
                host_.send_udp(udp_port_, target->public_ep, encode_message(deliver));
            }
        }
    }

    std::optional<PeerId> identify_udp(const Endpoint& observed) const {
        for (auto& [id, rec] : udp_records_)
            if (rec.public_ep == observed) return id;
        return std::nullopt;
    }

    // -- TCP wiring ---------------------------------------------------------

    struct TcpSession {
        sim::TcpConnPtr conn;
        std::string buffer;
        std::optional<PeerId> id;
    };

    void on_tcp_accept(sim::TcpConnPtr conn) {
        auto session = std::make_shared<TcpSession>();
        session->conn = conn;
        conn->on_data = [this, session](const std::string& bytes) {
            session->buffer += bytes;
            size_t nl;
            while ((nl = session->buffer.find('\n')) != std::string::npos) {
                std::string line = session->buffer.substr(0, nl);
                session->buffer.erase(0, nl + 1);
                if (auto msg = try_decode(line, Transport::tcp)) on_tcp_message(session, *msg);
            }
        };
        conn->on_closed = [this, session] { on_tcp_closed(session); };
    }

    void send_tcp(const std::shared_ptr<TcpSession>& session, const ControlMessage& m) {
        session->conn->send(encode_message(m) + "\n");
    }

    void on_tcp_message(const std::shared_ptr<TcpSession>& session, const ControlMessage& msg) {
        Endpoint observed = session->conn->key().remote;
        if (auto* reg = std::get_if<RegisterMsg>(&msg)) {
            session->id = reg->id;
            tcp_sessions_[reg->id] = session;
            send_tcp(session, handle_register(*reg, observed));
        } else if (auto* con = std::get_if<ConnectMsg>(&msg)) {
            auto result = handle_connect(*con, Transport::tcp);
            if (auto* err = std::get_if<ErrorMsg>(&result)) {
                send_tcp(session, *err);
                return;
            }
            auto& [to_requester, to_target] = std::get<0>(result);
            auto target_session = tcp_sessions_.find(con->peer);
            if (target_session == tcp_sessions_.end()) {
                send_tcp(session, ErrorMsg{"unknown peer: " + con->peer});
                return;
            }
            if (con->sequential && con->id != con->peer)
                pending_sequential_[con->peer] = con->id;
            send_tcp(session, to_requester);
            send_tcp(target_session->second, to_target);
        } else if (auto* rel = std::get_if<RelayMsg>(&msg)) {
            if (!session->id) {
                send_tcp(session, ErrorMsg{"relay before registration"});
                return;
            }
            auto result = relay(*rel, *session->id, Transport::tcp);
            if (auto* err = std::get_if<ErrorMsg>(&result)) {
                send_tcp(session, *err);
                return;
            }
            auto& [to_id, deliver] = std::get<0>(result);
            auto target_session = tcp_sessions_.find(to_id);
            if (target_session == tcp_sessions_.end()) {
                send_tcp(session, ErrorMsg{"unknown peer: " + to_id});
                return;
            }
            send_tcp(target_session->second, deliver);
        }
    }

    void on_tcp_closed(const std::shared_ptr<TcpSession>& session) {
        if (!session->id) return;
        tcp_sessions_.erase(*session->id);
        // Sequential hole punching: the target closing its server session is
        // the cue to close the requester's session, signaling it to connect.
        auto pending = pending_sequential_.find(*session->id);
        if (pending != pending_sequential_.end()) {
            auto requester = tcp_sessions_.find(pending->second);
            pending_sequential_.erase(pending);
            if (requester != tcp_sessions_.end()) {
                auto conn = requester->second->conn;
                tcp_sessions_.erase(requester);
                conn->close();
            }
        }
    }

    sim::SimNet& net_;
    sim::Host& host_;
    uint16_t udp_port_;
    uint16_t tcp_port_;
    sim::SimTime staleness_;
    std::map<PeerId, RendezvousRecord> udp_records_;
    std::map<PeerId, RendezvousRecord> tcp_records_;
    std::map<PeerId, std::shared_ptr<TcpSession>> tcp_sessions_;
    std::map<PeerId, PeerId> pending_sequential_;  // target id -> requester id
};

} // namespace holepunch
