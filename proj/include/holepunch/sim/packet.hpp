//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <string>

#include "holepunch/endpoint.hpp"

namespace holepunch::sim {

enum TcpFlags : uint8_t {
    tcp_none = 0,
    tcp_syn = 1 << 0,
    tcp_ack = 1 << 1,
    tcp_rst = 1 << 2,
};

struct Packet {
    Endpoint src;
    Endpoint dst;
    Transport transport = Transport::udp;
    uint8_t tcp_flags = tcp_none;  // empty for UDP; RST carries no payload
    std::string payload;

    bool is(uint8_t flags) const { return tcp_flags == flags; }
    bool has(uint8_t flags) const { return (tcp_flags & flags) == flags; }
};

inline std::string flags_string(uint8_t flags) {
    if (flags == tcp_none) return "-";
    std::string s;
    if (flags & tcp_syn) s += "SYN";
    if (flags & tcp_ack) s += s.empty() ? "ACK" : "-ACK";
    if (flags & tcp_rst) s += s.empty() ? "RST" : "-RST";
    return s;
}

inline std::string summarize(const Packet& p) {
    std::string s = std::string(to_string(p.transport)) + " " + format(p.src) + " > " + format(p.dst);
    if (p.transport == Transport::tcp) s += " [" + flags_string(p.tcp_flags) + "]";
    if (!p.payload.empty()) {
        s += " len=" + std::to_string(p.payload.size());
        // first few payload bytes make traces self-describing for JSON messages
        std::string head = p.payload.substr(0, 40);
        for (char& c : head)
            if (c < 0x20 || c > 0x7e) c = '.';
        s += " '" + head + (p.payload.size() > 40 ? "...'" : "'");
    }
    return s;
}

} // namespace holepunch::sim
