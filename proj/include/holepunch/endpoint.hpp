//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <array>
#include <charconv>
#include <compare>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace holepunch {

enum class Transport : uint8_t { udp, tcp };

inline const char* to_string(Transport t) {
    return t == Transport::udp ? "udp" : "tcp";
}

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A transport-qualified (address, port) pair. Addresses are realm-scoped
/// 32-bit values; they only mean something relative to one address realm.
struct Endpoint {
    uint32_t addr = 0;
    uint16_t port = 0;
    Transport transport = Transport::udp;

    friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

/// Session 4-tuple as seen from one host.
struct SessionKey {
    Endpoint local;
    Endpoint remote;

    friend auto operator<=>(const SessionKey&, const SessionKey&) = default;

    SessionKey mirrored() const { return SessionKey{remote, local}; }
};

using PeerId = std::string;

inline std::string format_address(uint32_t addr) {
    std::string out;
    out.reserve(15);
    for (int shift = 24; shift >= 0; shift -= 8) {
        if (!out.empty()) out.push_back('.');
        out += std::to_string((addr >> shift) & 0xff);
    }
    return out;
}

inline std::string format(const Endpoint& ep) {
    return format_address(ep.addr) + ":" + std::to_string(ep.port);
}

namespace detail {

inline uint32_t parse_decimal(std::string_view text, uint32_t max, const char* what) {
    if (text.empty() || text.size() > 10)
        throw ParseError(std::string("bad ") + what + ": '" + std::string(text) + "'");
    uint32_t value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || value > max)
        throw ParseError(std::string("bad ") + what + ": '" + std::string(text) + "'");
    return value;
}

} // namespace detail

inline uint32_t parse_address(std::string_view text) {
    uint32_t addr = 0;
    size_t pos = 0;
    for (int octet = 0; octet < 4; ++octet) {
        size_t dot = octet < 3 ? text.find('.', pos) : text.size();
        if (dot == std::string_view::npos)
            throw ParseError("bad address: '" + std::string(text) + "'");
        addr = (addr << 8) | detail::parse_decimal(text.substr(pos, dot - pos), 255, "address octet");
        pos = dot + 1;
    }
    return addr;
}

/// Parses "a.b.c.d:port". Ports must be nonzero: a zero port can never
/// identify a session participant.
inline Endpoint parse_endpoint(std::string_view text, Transport transport = Transport::udp) {
    size_t colon = text.rfind(':');
    if (colon == std::string_view::npos)
        throw ParseError("missing port in '" + std::string(text) + "'");
    uint32_t addr = parse_address(text.substr(0, colon));
    uint32_t port = detail::parse_decimal(text.substr(colon + 1), 65535, "port");
    if (port == 0)
        throw ParseError("port must be > 0 in '" + std::string(text) + "'");
    return Endpoint{addr, static_cast<uint16_t>(port), transport};
}

/// One's-complement address obfuscation. Applied to private-endpoint
/// addresses before they ride inside packet payloads, so a payload-scanning
/// NAT never sees byte patterns that match a mapped address. Self-inverse.
inline uint32_t obfuscate_address(uint32_t addr) {
    return ~addr;
}

/// 16-byte random token pre-arranged through the rendezvous server; peers
/// echo it to prove they are the intended host and not stray traffic.
struct Nonce {
    std::array<uint8_t, 16> bytes{};

    friend auto operator<=>(const Nonce&, const Nonce&) = default;

    static Nonce generate(std::mt19937_64& rng) {
        Nonce n;
        for (size_t i = 0; i < n.bytes.size(); i += 8) {
            uint64_t word = rng();
            for (size_t j = 0; j < 8; ++j)
                n.bytes[i + j] = static_cast<uint8_t>(word >> (8 * j));
        }
        return n;
    }

    std::string to_hex() const {
        static const char digits[] = "0123456789abcdef";
        std::string out;
        out.reserve(32);
        for (uint8_t b : bytes) {
            out.push_back(digits[b >> 4]);
            out.push_back(digits[b & 0xf]);
        }
        return out;
    }

    static Nonce from_hex(std::string_view hex) {
        if (hex.size() != 32)
            throw ParseError("nonce must be 32 hex chars");
        auto nibble = [](char c) -> int {
            if (c >= '0' && c <= '9') return c - '0';
            if (c >= 'a' && c <= 'f') return c - 'a' + 10;
            if (c >= 'A' && c <= 'F') return c - 'A' + 10;
            throw ParseError("bad hex digit in nonce");
        };
        Nonce n;
        for (size_t i = 0; i < 16; ++i)
            n.bytes[i] = static_cast<uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
        return n;
    }
};

} // namespace holepunch
