//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#include <catch2/catch_amalgamated.hpp>

#include "holepunch/message.hpp"

using namespace holepunch;

namespace {

Nonce nonce_of(uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Nonce::generate(rng);
}

std::vector<ControlMessage> sample_messages(Transport t) {
    Endpoint priv = parse_endpoint("10.0.0.1:4321", t);
    Endpoint pub = parse_endpoint("155.99.25.11:62000", t);
    Nonce n = nonce_of(1);
    std::vector<ControlMessage> all;
    all.push_back(RegisterMsg{"A", priv});
    all.push_back(RegisterOkMsg{pub});
    all.push_back(ConnectMsg{"A", "B", n});
    all.push_back(ConnectMsg{"A", "B", n, true, false, std::nullopt});
    all.push_back(ConnectMsg{"A", "B", n, false, true, pub});
    all.push_back(ForwardMsg{"B", pub, priv, n});
    all.push_back(ForwardMsg{"B", pub, priv, n, true, false, false, std::nullopt});
    all.push_back(ForwardMsg{"B", pub, priv, n, false, true, true, pub});
    all.push_back(HelloMsg{"B", n});
    all.push_back(HelloAckMsg{"A", n});
    all.push_back(RelayMsg{"B", "hi"});
    all.push_back(RelayDeliverMsg{"A", "hi"});
    all.push_back(ErrorMsg{"unknown peer: Z"});
    return all;
}

} // namespace

TEST_CASE("every variant round-trips through the codec") {
    for (Transport t : {Transport::udp, Transport::tcp}) {
        for (const auto& msg : sample_messages(t)) {
            CAPTURE(encode_message(msg));
            CHECK(decode_message(encode_message(msg), t) == msg);
        }
    }
}

TEST_CASE("register wire form obfuscates the private address") {
    RegisterMsg reg{"A", parse_endpoint("10.0.0.1:4321")};
    CHECK(encode_message(reg) == R"({"t":"reg","id":"A","priv":"245.255.255.254:4321"})");
}

TEST_CASE("hello wire form") {
    HelloMsg hello{"B", Nonce{}};
    CHECK(encode_message(hello) ==
          R"({"t":"hello","from":"B","nonce":"00000000000000000000000000000000"})");
}

TEST_CASE("decoded endpoints carry the receiving transport") {
    auto bytes = encode_message(RegisterMsg{"A", parse_endpoint("10.0.0.1:4321", Transport::tcp)});
    auto msg = decode_message(bytes, Transport::tcp);
    CHECK(std::get<RegisterMsg>(msg).private_ep.transport == Transport::tcp);
}

TEST_CASE("decode errors carry tag and field information") {
    CHECK_THROWS_AS(decode_message(R"({"t":"bogus"})"), DecodeError);
    CHECK_THROWS_AS(decode_message("not json at all"), DecodeError);
    CHECK_THROWS_AS(decode_message(R"([1,2,3])"), DecodeError);
    // truncated payload: no partial message comes back
    auto full = encode_message(ForwardMsg{"B", parse_endpoint("155.99.25.11:62000"),
                                          parse_endpoint("10.0.0.1:4321"), nonce_of(2)});
    CHECK_THROWS_AS(decode_message(full.substr(0, full.size() / 2)), DecodeError);
    try {
        decode_message(R"({"t":"reg","id":"A"})");
        FAIL("expected throw");
    } catch (const DecodeError& e) {
        std::string what = e.what();
        CHECK(what.find("reg") != std::string::npos);
        CHECK(what.find("priv") != std::string::npos);
    }
}

TEST_CASE("try_decode swallows malformed payloads") {
    CHECK_FALSE(try_decode("garbage").has_value());
    CHECK(try_decode(encode_message(ErrorMsg{"x"})).has_value());
}

TEST_CASE("randomized round-trip over generated messages") {
    std::mt19937_64 rng(42);
    auto random_ep = [&](Transport t) {
        return Endpoint{static_cast<uint32_t>(rng()), static_cast<uint16_t>(rng() % 65535 + 1), t};
    };
    auto random_id = [&] { return "peer-" + std::to_string(rng() % 1000); };
    for (int i = 0; i < 300; ++i) {
        Transport t = rng() % 2 ? Transport::udp : Transport::tcp;
        ControlMessage msg;
        switch (rng() % 9) {
        case 0: msg = RegisterMsg{random_id(), random_ep(t)}; break;
        case 1: msg = RegisterOkMsg{random_ep(t)}; break;
        case 2:
            msg = ConnectMsg{random_id(), random_id(), Nonce::generate(rng), rng() % 2 == 0,
                             rng() % 2 == 0,
                             rng() % 2 ? std::optional(random_ep(t)) : std::nullopt};
            break;
        case 3:
            msg = ForwardMsg{random_id(), random_ep(t), random_ep(t), Nonce::generate(rng),
                             rng() % 2 == 0, rng() % 2 == 0, rng() % 2 == 0,
                             rng() % 2 ? std::optional(random_ep(t)) : std::nullopt};
            break;
        case 4: msg = HelloMsg{random_id(), Nonce::generate(rng)}; break;
        case 5: msg = HelloAckMsg{random_id(), Nonce::generate(rng)}; break;
        case 6: msg = RelayMsg{random_id(), "payload " + std::to_string(rng())}; break;
        case 7: msg = RelayDeliverMsg{random_id(), "payload " + std::to_string(rng())}; break;
        default: msg = ErrorMsg{"reason " + std::to_string(rng())}; break;
        }
        CHECK(decode_message(encode_message(msg), t) == msg);
    }
}
