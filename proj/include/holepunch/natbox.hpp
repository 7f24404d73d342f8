//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "holepunch/sim/event_loop.hpp"
#include "holepunch/sim/packet.hpp"

namespace holepunch {

// Behavioral axes of a NAPT middlebox. Mapping and filtering are separate
// axes on purpose: endpoint-independent mapping with per-session filtering
// and "symmetric" (address-port-dependent) mapping are distinct configs
// even though RFC 3489's cone taxonomy conflates them.

enum class MappingPolicy : uint8_t {
    endpoint_independent,   // "cone": one public endpoint per private endpoint
    address_dependent,      // fresh mapping per remote address
    address_port_dependent, // "symmetric": fresh mapping per remote endpoint
};

using FilteringPolicy = MappingPolicy;

enum class TcpUnsolicited : uint8_t { drop, rst, allow };

struct PortAlloc {
    enum class Kind : uint8_t { preserve_then_sequential, sequential, random };
    Kind kind = Kind::preserve_then_sequential;
    uint16_t start = 62000;
    uint16_t stride = 1;     // sequential only; symmetric NATs in the wild skip in steps
    uint64_t seed = 0;       // random only

    static PortAlloc preserve() { return {Kind::preserve_then_sequential, 62000, 1, 0}; }
    static PortAlloc sequential(uint16_t start, uint16_t stride = 1) {
        return {Kind::sequential, start, stride, 0};
    }
    static PortAlloc random(uint64_t seed) { return {Kind::random, 62000, 1, seed}; }
};

struct NatConfig {
    MappingPolicy mapping = MappingPolicy::endpoint_independent;
    FilteringPolicy filtering = FilteringPolicy::address_dependent;
    bool hairpin = false;
    TcpUnsolicited tcp_unsolicited = TcpUnsolicited::drop;
    PortAlloc port_alloc = PortAlloc::sequential(62000);
    sim::SimTime udp_idle_timeout = sim::operator""_s(30ull);
    bool payload_rewrite = false;
    uint32_t public_address = 0;
    // Whether hairpinned packets face the same filtering as public-side
    // arrivals. Some NATs treat any traffic aimed at their public ports as
    // untrusted regardless of origin.
    bool hairpin_filter = false;
    uint16_t pool_size = 1000;
};

struct MappingEntry {
    Endpoint private_ep;
    Endpoint public_ep;
    sim::SimTime last_activity = 0;
    std::set<Endpoint> seen_remotes;
};

/// Inbound translation outcomes; all are defined results, not errors.
struct InboundDrop {
    std::string reason;
};
struct InboundRst {
    sim::Packet rst;  // RST the NAT sends back to the outside sender
};
using InboundResult = std::variant<sim::Packet, InboundDrop, InboundRst>;

inline std::optional<uint16_t> predict_next_port(
    std::span<const std::pair<Endpoint, uint16_t>> observed);

class NatBox {
public:
    // Fired once per translation decision with a short human-readable rule;
    // the simulator routes these into the packet trace.
    std::function<void(const std::string&)> on_decision;

    explicit NatBox(NatConfig config)
        : config_(config), rng_(config.port_alloc.seed), next_port_(config.port_alloc.start) {}

    const NatConfig& config() const { return config_; }
    uint64_t exhaustion_count() const { return exhaustion_count_; }

    /// Packet leaving the private realm. Creates or reuses a mapping and
    /// rewrites the source to the mapped public endpoint. nullopt = dropped
    /// (port pool exhausted).
    std::optional<sim::Packet> translate_outbound(sim::Packet pkt, sim::SimTime now) {
        bool teardown = pkt.transport == Transport::tcp && pkt.has(sim::tcp_rst);
        MappingEntry* entry = find_outbound(pkt.src, pkt.dst, now);
        if (!entry) {
            if (teardown) {
                decide("outbound RST with no mapping, dropped");
                return std::nullopt;
            }
            entry = create_mapping(pkt.src, pkt.dst, now);
            if (!entry) {
                ++exhaustion_count_;
                decide("port pool exhausted, packet dropped");
                return std::nullopt;
            }
            decide("new mapping " + format(pkt.src) + " -> " + format(entry->public_ep));
        } else {
            decide("reuse mapping " + format(pkt.src) + " -> " + format(entry->public_ep));
        }
        entry->last_activity = now;
        pkt.src = entry->public_ep;
        if (teardown) {
            // Closes only the session with this remote. The mapping (and the
            // holes other sessions punched through it) survives until the
            // last session goes away.
            entry->seen_remotes.erase(pkt.dst);
            if (entry->seen_remotes.empty()) {
                decide("last session closed, mapping removed");
                erase_public(pkt.src);
            } else {
                decide("session with " + format(pkt.dst) + " closed");
            }
            return pkt;
        }
        entry->seen_remotes.insert(pkt.dst);
        if (config_.payload_rewrite && pkt.transport == Transport::udp) rewrite_payload(pkt);
        return pkt;
    }

    /// Packet arriving from the public side, addressed to one of this NAT's
    /// public endpoints.
    InboundResult translate_inbound(sim::Packet pkt, sim::SimTime now) {
        MappingEntry* entry = find_by_public(pkt.dst, now);
        if (entry && filter_admits(*entry, pkt.src)) {
            entry->last_activity = now;
            pkt.dst = entry->private_ep;
            decide("inbound admitted -> " + format(pkt.dst));
            return pkt;
        }
        if (pkt.transport == Transport::tcp && pkt.has(sim::tcp_syn) && !pkt.has(sim::tcp_ack)) {
            switch (config_.tcp_unsolicited) {
            case TcpUnsolicited::drop:
                decide("unsolicited SYN dropped");
                return InboundDrop{"unsolicited SYN"};
            case TcpUnsolicited::rst: {
                decide("unsolicited SYN answered with RST");
                sim::Packet rst;
                rst.src = pkt.dst;
                rst.dst = pkt.src;
                rst.transport = Transport::tcp;
                rst.tcp_flags = sim::tcp_rst;
                return InboundRst{rst};
            }
            case TcpUnsolicited::allow:
                // Pass-through to whatever private endpoint currently owns
                // the port; without a live mapping there is nothing to hit.
                if (entry) {
                    entry->last_activity = now;
                    pkt.dst = entry->private_ep;
                    decide("unsolicited SYN allowed -> " + format(pkt.dst));
                    return pkt;
                }
                decide("unsolicited SYN to unmapped port dropped");
                return InboundDrop{"no mapping for port"};
            }
        }
        decide(entry ? "inbound rejected by filtering" : "inbound to unmapped endpoint dropped");
        return InboundDrop{entry ? "filtered" : "no mapping"};
    }

    /// Private-side packet addressed to one of this NAT's own public
    /// endpoints: loop it back, translating both source and destination.
    std::optional<sim::Packet> hairpin_translate(sim::Packet pkt, sim::SimTime now) {
        if (!config_.hairpin) {
            decide("hairpin disabled, packet dropped");
            return std::nullopt;
        }
        MappingEntry* target = find_by_public(pkt.dst, now);
        if (!target) {
            decide("hairpin to unmapped public port dropped");
            return std::nullopt;
        }
        MappingEntry* src_entry = find_outbound(pkt.src, pkt.dst, now);
        if (!src_entry) {
            src_entry = create_mapping(pkt.src, pkt.dst, now);
            if (!src_entry) {
                ++exhaustion_count_;
                decide("port pool exhausted, hairpin dropped");
                return std::nullopt;
            }
        }
        src_entry->seen_remotes.insert(pkt.dst);
        src_entry->last_activity = now;
        pkt.src = src_entry->public_ep;
        if (config_.hairpin_filter && !filter_admits(*target, pkt.src)) {
            decide("hairpin rejected by public-port filtering");
            return std::nullopt;
        }
        target->last_activity = now;
        pkt.dst = target->private_ep;
        if (config_.payload_rewrite && pkt.transport == Transport::udp) rewrite_payload(pkt);
        decide("hairpin " + format(pkt.src) + " -> " + format(pkt.dst));
        return pkt;
    }

    /// Drops idle UDP mappings. TCP mappings only die on observed teardown.
    size_t expire_mappings(sim::SimTime now) {
        size_t expired = 0;
        for (auto it = entries_.begin(); it != entries_.end();) {
            if (is_expired(it->second, now)) {
                decide("mapping " + format(it->second.public_ep) + " expired");
                by_public_.erase(pub_key(it->second.public_ep));
                it = entries_.erase(it);
                ++expired;
            } else {
                ++it;
            }
        }
        return expired;
    }

    /// Simulates a NAT restart: all translation state gone.
    void clear() {
        entries_.clear();
        by_public_.clear();
        next_port_ = config_.port_alloc.start;
        decide("translation table cleared");
    }

    size_t live_mappings(sim::SimTime now) {
        expire_mappings(now);
        return entries_.size();
    }

    /// Public source endpoints currently visible for a private endpoint.
    std::vector<Endpoint> public_endpoints_of(const Endpoint& private_ep, sim::SimTime now) {
        expire_mappings(now);
        std::vector<Endpoint> out;
        for (auto& [k, e] : entries_)
            if (e.private_ep == private_ep) out.push_back(e.public_ep);
        return out;
    }

private:
    struct Key {
        Transport transport;
        Endpoint private_ep;
        uint32_t remote_addr;  // zero unless mapping depends on it
        uint16_t remote_port;  // zero unless mapping depends on it
        friend auto operator<=>(const Key&, const Key&) = default;
    };

    Key map_key(const Endpoint& src, const Endpoint& dst) const {
        Key k{src.transport, src, 0, 0};
        switch (config_.mapping) {
        case MappingPolicy::endpoint_independent: break;
        case MappingPolicy::address_dependent: k.remote_addr = dst.addr; break;
        case MappingPolicy::address_port_dependent:
            k.remote_addr = dst.addr;
            k.remote_port = dst.port;
            break;
        }
        return k;
    }

    static std::pair<uint8_t, uint16_t> pub_key(const Endpoint& pub) {
        return {static_cast<uint8_t>(pub.transport), pub.port};
    }

    bool is_expired(const MappingEntry& e, sim::SimTime now) const {
        return e.public_ep.transport == Transport::udp &&
               now - e.last_activity >= config_.udp_idle_timeout;
    }

    MappingEntry* find_outbound(const Endpoint& src, const Endpoint& dst, sim::SimTime now) {
        auto it = entries_.find(map_key(src, dst));
        if (it == entries_.end()) return nullptr;
        if (is_expired(it->second, now)) {
            by_public_.erase(pub_key(it->second.public_ep));
            entries_.erase(it);
            return nullptr;
        }
        return &it->second;
    }

    MappingEntry* find_by_public(const Endpoint& dst, sim::SimTime now) {
        auto it = by_public_.find(pub_key(dst));
        if (it == by_public_.end()) return nullptr;
        auto eit = entries_.find(it->second);
        if (eit == entries_.end()) {
            by_public_.erase(it);
            return nullptr;
        }
        if (is_expired(eit->second, now)) {
            by_public_.erase(it);
            entries_.erase(eit);
            return nullptr;
        }
        return &eit->second;
    }

    bool filter_admits(const MappingEntry& entry, const Endpoint& sender) const {
        switch (config_.filtering) {
        case FilteringPolicy::endpoint_independent: return true;
        case FilteringPolicy::address_dependent:
            for (const auto& r : entry.seen_remotes)
                if (r.addr == sender.addr) return true;
            return false;
        case FilteringPolicy::address_port_dependent:
            return entry.seen_remotes.count(sender) > 0;
        }
        return false;
    }

    bool port_in_use(Transport transport, uint16_t port, sim::SimTime now) {
        auto it = by_public_.find({static_cast<uint8_t>(transport), port});
        if (it == by_public_.end()) return false;
        auto eit = entries_.find(it->second);
        if (eit == entries_.end() || is_expired(eit->second, now)) {
            if (eit != entries_.end()) entries_.erase(eit);
            by_public_.erase(it);
            return false;
        }
        return true;
    }

    std::optional<uint16_t> allocate_port(const Endpoint& src, sim::SimTime now) {
        const auto& pa = config_.port_alloc;
        if (pa.kind == PortAlloc::Kind::preserve_then_sequential &&
            !port_in_use(src.transport, src.port, now))
            return src.port;
        if (pa.kind == PortAlloc::Kind::random) {
            for (int attempt = 0; attempt < 4 * config_.pool_size; ++attempt) {
                auto port = static_cast<uint16_t>(pa.start + rng_() % config_.pool_size);
                if (!port_in_use(src.transport, port, now)) return port;
            }
            return std::nullopt;
        }
        for (uint32_t scanned = 0; scanned < config_.pool_size; ++scanned) {
            uint16_t candidate = next_port_;
            uint32_t offset = static_cast<uint32_t>(next_port_ - pa.start) + pa.stride;
            next_port_ = static_cast<uint16_t>(pa.start + offset % config_.pool_size);
            if (!port_in_use(src.transport, candidate, now)) return candidate;
        }
        return std::nullopt;
    }

    MappingEntry* create_mapping(const Endpoint& src, const Endpoint& dst, sim::SimTime now) {
        auto port = allocate_port(src, now);
        if (!port) return nullptr;
        MappingEntry entry;
        entry.private_ep = src;
        entry.public_ep = Endpoint{config_.public_address, *port, src.transport};
        entry.last_activity = now;
        Key k = map_key(src, dst);
        auto [it, inserted] = entries_.insert_or_assign(k, std::move(entry));
        by_public_.insert_or_assign(pub_key(it->second.public_ep), k);
        return &it->second;
    }

    void erase_public(const Endpoint& pub) {
        auto it = by_public_.find(pub_key(pub));
        if (it == by_public_.end()) return;
        entries_.erase(it->second);
        by_public_.erase(it);
    }

    // A few NATs scan packet bodies for 32-bit values that look like mapped
    // private addresses and translate them like header fields. Modeled as a
    // scan over 4-byte-aligned windows of the UDP payload.
    void rewrite_payload(sim::Packet& pkt) {
        auto& body = pkt.payload;
        for (size_t i = 0; i + 4 <= body.size(); i += 4) {
            uint32_t word = (static_cast<uint32_t>(static_cast<uint8_t>(body[i])) << 24) |
                            (static_cast<uint32_t>(static_cast<uint8_t>(body[i + 1])) << 16) |
                            (static_cast<uint32_t>(static_cast<uint8_t>(body[i + 2])) << 8) |
                            static_cast<uint32_t>(static_cast<uint8_t>(body[i + 3]));
            bool mapped = false;
            for (auto& [k, e] : entries_)
                if (e.private_ep.addr == word) mapped = true;
            if (!mapped) continue;
            uint32_t pub = config_.public_address;
            body[i] = static_cast<char>(pub >> 24);
            body[i + 1] = static_cast<char>(pub >> 16);
            body[i + 2] = static_cast<char>(pub >> 8);
            body[i + 3] = static_cast<char>(pub);
            decide("payload address rewritten at offset " + std::to_string(i));
        }
    }

    void decide(const std::string& what) {
        if (on_decision) on_decision(what);
    }

    NatConfig config_;
    std::mt19937_64 rng_;
    uint16_t next_port_;
    uint64_t exhaustion_count_ = 0;
    std::map<Key, MappingEntry> entries_;
    std::map<std::pair<uint8_t, uint16_t>, Key> by_public_;
};

/// Infers the next public port a sequential allocator will hand out from
/// prior (destination, observed port) samples. Needs a constant stride.
inline std::optional<uint16_t> predict_next_port(
    std::span<const std::pair<Endpoint, uint16_t>> observed) {
    if (observed.size() < 2) return std::nullopt;
    int stride = observed[1].second - observed[0].second;
    for (size_t i = 2; i < observed.size(); ++i)
        if (observed[i].second - observed[i - 1].second != stride) return std::nullopt;
    return static_cast<uint16_t>(observed.back().second + stride);
}

} // namespace holepunch
