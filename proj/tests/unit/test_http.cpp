// Contract tests for the HTTP completion backend against a stub server bound
// to 127.0.0.1. No external network access is needed.

#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pmg/errors.hpp"
#include "pmg/llm.hpp"
#include "pmg/prompt.hpp"

using namespace pmg;
using nlohmann::json;

namespace {

constexpr const char* kKeyVar = "PMG_TEST_STUB_KEY";

// Serves POST /v1/chat/completions; `statuses` lists the status returned for
// each successive request (the last entry repeats).
class StubServer {
public:
    explicit StubServer(std::vector<int> statuses, std::string reply = "The keywords are: 1. a; 2. b")
        : statuses_(std::move(statuses)), reply_(std::move(reply)) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            const std::size_t n = calls_++;
            last_body_ = req.body;
            last_auth_ = req.get_header_value("Authorization");
            const int status = statuses_[std::min(n, statuses_.size() - 1)];
            res.status = status;
            if (status == 200)
                res.set_content(json{{"choices", {{{"message", {{"role", "assistant"}, {"content", reply_}}}}}}}.dump(),
                                "application/json");
            else
                res.set_content("stub error", "text/plain");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubServer() {
        server_.stop();
        thread_.join();
    }

    HttpEndpointConfig endpoint() const {
        HttpEndpointConfig c;
        c.base_url = "http://127.0.0.1:" + std::to_string(port_);
        c.api_key_env = kKeyVar;
        c.initial_backoff = std::chrono::milliseconds(1);
        c.timeout = std::chrono::seconds(5);
        return c;
    }
    std::size_t calls() const { return calls_; }
    json last_body() const { return json::parse(last_body_); }
    std::string last_auth() const { return last_auth_; }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::vector<int> statuses_;
    std::string reply_;
    std::atomic<std::size_t> calls_{0};
    std::string last_body_, last_auth_;
};

struct KeyGuard {
    KeyGuard() { setenv(kKeyVar, "stub-secret", 1); }
    ~KeyGuard() { unsetenv(kKeyVar); }
};

}  // namespace

TEST_CASE("request body and headers follow the chat completion shape") {
    KeyGuard key;
    StubServer stub({200});
    const HttpLlm llm(stub.endpoint());
    CHECK(llm.generate("hello there") == "The keywords are: 1. a; 2. b");
    CHECK(stub.calls() == 1);
    const json body = stub.last_body();
    CHECK(body["model"] == "llama-2-7b-chat");
    CHECK(body["temperature"] == 0.0);
    CHECK(body["max_tokens"] == 256);
    REQUIRE(body["messages"].size() == 1);
    CHECK(body["messages"][0]["role"] == "user");
    CHECK(body["messages"][0]["content"] == "hello there");
    CHECK(stub.last_auth() == "Bearer stub-secret");
}

TEST_CASE("transient failures are retried until success") {
    KeyGuard key;
    StubServer stub({503, 429, 200});
    CHECK(HttpLlm(stub.endpoint()).generate("x") == "The keywords are: 1. a; 2. b");
    CHECK(stub.calls() == 3);
}

TEST_CASE("persistent server errors give up after three attempts") {
    KeyGuard key;
    StubServer stub({500});
    try {
        HttpLlm(stub.endpoint()).generate("x");
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(e.retryable());
        CHECK(e.exit_code() == 4);
    }
    CHECK(stub.calls() == 3);
}

TEST_CASE("client errors fail without retrying") {
    KeyGuard key;
    StubServer stub({400});
    try {
        HttpLlm(stub.endpoint()).generate("x");
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK_FALSE(e.retryable());
    }
    CHECK(stub.calls() == 1);
}

TEST_CASE("a missing API key fails before any request") {
    unsetenv(kKeyVar);
    StubServer stub({200});
    CHECK_THROWS_AS(HttpLlm(stub.endpoint()).generate("x"), BackendError);
    CHECK(stub.calls() == 0);
}

TEST_CASE("an unreachable endpoint is a retryable backend error") {
    KeyGuard key;
    HttpEndpointConfig c;
    c.base_url = "http://127.0.0.1:1";
    c.api_key_env = kKeyVar;
    c.initial_backoff = std::chrono::milliseconds(1);
    c.timeout = std::chrono::seconds(1);
    try {
        HttpLlm(c).generate("x");
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(e.retryable());
    }
}

TEST_CASE("replies parse into keywords end to end") {
    KeyGuard key;
    StubServer stub({200}, "The keywords are: 1. Cartoon; 2. Black; 3. Summer");
    CHECK(parse_keywords(HttpLlm(stub.endpoint()).generate("x")) ==
          std::vector<std::string>{"cartoon", "black", "summer"});
}
