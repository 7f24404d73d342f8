//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <optional>
#include <string>
#include <variant>

#include <json.hpp>

#include "holepunch/endpoint.hpp"

namespace holepunch {

// Control messages exchanged between clients, the rendezvous server, and
// peers. The wire form is one UTF-8 JSON object per message, tagged with
// "t"; datagrams carry the object as the whole payload, streams terminate
// it with '\n'. Private-endpoint addresses travel obfuscated under "priv".

struct DecodeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RegisterMsg {
    PeerId id;
    Endpoint private_ep;
    friend bool operator==(const RegisterMsg&, const RegisterMsg&) = default;
};

struct RegisterOkMsg {
    Endpoint public_ep;
    friend bool operator==(const RegisterOkMsg&, const RegisterOkMsg&) = default;
};

struct ConnectMsg {
    PeerId id;
    PeerId peer;
    Nonce nonce;
    bool sequential = false;            // NatTrav-style sequential TCP procedure
    bool reversal = false;              // ask for connection reversal
    std::optional<Endpoint> predicted;  // requester's predicted public endpoint
    friend bool operator==(const ConnectMsg&, const ConnectMsg&) = default;
};

struct ForwardMsg {
    PeerId peer;
    Endpoint public_ep;
    Endpoint private_ep;
    Nonce nonce;
    bool sequential = false;
    bool reversal = false;  // receiver should initiate the connection itself
    bool direct = false;    // peer is un-NATted; plain outbound connect works
    std::optional<Endpoint> predicted;
    friend bool operator==(const ForwardMsg&, const ForwardMsg&) = default;
};

struct HelloMsg {
    PeerId from;
    Nonce nonce;
    friend bool operator==(const HelloMsg&, const HelloMsg&) = default;
};

struct HelloAckMsg {
    PeerId from;
    Nonce nonce;
    friend bool operator==(const HelloAckMsg&, const HelloAckMsg&) = default;
};

struct RelayMsg {
    PeerId to;
    std::string payload;
    friend bool operator==(const RelayMsg&, const RelayMsg&) = default;
};

struct RelayDeliverMsg {
    PeerId from;
    std::string payload;
    friend bool operator==(const RelayDeliverMsg&, const RelayDeliverMsg&) = default;
};

struct ErrorMsg {
    std::string reason;
    friend bool operator==(const ErrorMsg&, const ErrorMsg&) = default;
};

using ControlMessage = std::variant<RegisterMsg, RegisterOkMsg, ConnectMsg, ForwardMsg,
                                    HelloMsg, HelloAckMsg, RelayMsg, RelayDeliverMsg,
                                    ErrorMsg>;

namespace detail {

using wire_json = nlohmann::ordered_json;

// Private endpoints carry the obfuscated address on the wire.
inline std::string wire_private(const Endpoint& ep) {
    return format_address(obfuscate_address(ep.addr)) + ":" + std::to_string(ep.port);
}

inline std::string require_string(const wire_json& j, const char* tag, const char* field) {
    auto it = j.find(field);
    if (it == j.end() || !it->is_string())
        throw DecodeError(std::string("message '") + tag + "' missing field '" + field + "'");
    return it->get<std::string>();
}

inline Endpoint read_public(const wire_json& j, const char* tag, const char* field,
                            Transport transport) {
    return parse_endpoint(require_string(j, tag, field), transport);
}

inline Endpoint read_private(const wire_json& j, const char* tag, const char* field,
                             Transport transport) {
    Endpoint ep = parse_endpoint(require_string(j, tag, field), transport);
    ep.addr = obfuscate_address(ep.addr);
    return ep;
}

inline bool read_flag(const wire_json& j, const char* field) {
    auto it = j.find(field);
    return it != j.end() && it->is_boolean() && it->get<bool>();
}

} // namespace detail

inline std::string encode_message(const ControlMessage& msg) {
    using detail::wire_json;
    wire_json j;
    std::visit(
        [&](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, RegisterMsg>) {
                j["t"] = "reg";
                j["id"] = m.id;
                j["priv"] = detail::wire_private(m.private_ep);
            } else if constexpr (std::is_same_v<M, RegisterOkMsg>) {
                j["t"] = "reg_ok";
                j["pub"] = format(m.public_ep);
            } else if constexpr (std::is_same_v<M, ConnectMsg>) {
                j["t"] = "connect";
                j["id"] = m.id;
                j["peer"] = m.peer;
                j["nonce"] = m.nonce.to_hex();
                if (m.sequential) j["seq"] = true;
                if (m.reversal) j["rev"] = true;
                if (m.predicted) j["pred"] = format(*m.predicted);
            } else if constexpr (std::is_same_v<M, ForwardMsg>) {
                j["t"] = "forward";
                j["peer"] = m.peer;
                j["pub"] = format(m.public_ep);
                j["priv"] = detail::wire_private(m.private_ep);
                j["nonce"] = m.nonce.to_hex();
                if (m.sequential) j["seq"] = true;
                if (m.reversal) j["rev"] = true;
                if (m.direct) j["direct"] = true;
                if (m.predicted) j["pred"] = format(*m.predicted);
            } else if constexpr (std::is_same_v<M, HelloMsg>) {
                j["t"] = "hello";
                j["from"] = m.from;
                j["nonce"] = m.nonce.to_hex();
            } else if constexpr (std::is_same_v<M, HelloAckMsg>) {
                j["t"] = "hello_ack";
                j["from"] = m.from;
                j["nonce"] = m.nonce.to_hex();
            } else if constexpr (std::is_same_v<M, RelayMsg>) {
                j["t"] = "relay";
                j["to"] = m.to;
                j["payload"] = m.payload;
            } else if constexpr (std::is_same_v<M, RelayDeliverMsg>) {
                j["t"] = "relay_deliver";
                j["from"] = m.from;
                j["payload"] = m.payload;
            } else if constexpr (std::is_same_v<M, ErrorMsg>) {
                j["t"] = "err";
                j["reason"] = m.reason;
            }
        },
        msg);
    return j.dump();
}

/// Inverse of encode_message. The transport the bytes arrived on qualifies
/// every endpoint in the decoded message; it is not written on the wire.
inline ControlMessage decode_message(std::string_view bytes,
                                     Transport transport = Transport::udp) {
    using detail::wire_json;
    wire_json j = wire_json::parse(bytes, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw DecodeError("invalid JSON payload");
    std::string tag = detail::require_string(j, "?", "t");
    const char* t = tag.c_str();
    auto read_optional_pred = [&]() -> std::optional<Endpoint> {
        auto it = j.find("pred");
        if (it == j.end()) return std::nullopt;
        if (!it->is_string()) throw DecodeError("message '" + tag + "' bad field 'pred'");
        return parse_endpoint(it->get<std::string>(), transport);
    };
    if (tag == "reg")
        return RegisterMsg{detail::require_string(j, t, "id"),
                           detail::read_private(j, t, "priv", transport)};
    if (tag == "reg_ok")
        return RegisterOkMsg{detail::read_public(j, t, "pub", transport)};
    if (tag == "connect")
        return ConnectMsg{detail::require_string(j, t, "id"),
                          detail::require_string(j, t, "peer"),
                          Nonce::from_hex(detail::require_string(j, t, "nonce")),
                          detail::read_flag(j, "seq"),
                          detail::read_flag(j, "rev"),
                          read_optional_pred()};
    if (tag == "forward")
        return ForwardMsg{detail::require_string(j, t, "peer"),
                          detail::read_public(j, t, "pub", transport),
                          detail::read_private(j, t, "priv", transport),
                          Nonce::from_hex(detail::require_string(j, t, "nonce")),
                          detail::read_flag(j, "seq"),
                          detail::read_flag(j, "rev"),
                          detail::read_flag(j, "direct"),
                          read_optional_pred()};
    if (tag == "hello")
        return HelloMsg{detail::require_string(j, t, "from"),
                        Nonce::from_hex(detail::require_string(j, t, "nonce"))};
    if (tag == "hello_ack")
        return HelloAckMsg{detail::require_string(j, t, "from"),
                           Nonce::from_hex(detail::require_string(j, t, "nonce"))};
    if (tag == "relay")
        return RelayMsg{detail::require_string(j, t, "to"),
                        detail::require_string(j, t, "payload")};
    if (tag == "relay_deliver")
        return RelayDeliverMsg{detail::require_string(j, t, "from"),
                               detail::require_string(j, t, "payload")};
    if (tag == "err")
        return ErrorMsg{detail::require_string(j, t, "reason")};
    throw DecodeError("unknown message tag '" + tag + "'");
}

/// Tries to decode; returns nullopt on any malformed payload. Stray traffic
/// on punched ports is routine, so most receive paths want this form.
inline std::optional<ControlMessage> try_decode(std::string_view bytes,
                                                Transport transport = Transport::udp) {
    try {
        return decode_message(bytes, transport);
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

} // namespace holepunch
