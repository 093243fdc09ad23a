#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "poisondet/digest.hpp"
#include "poisondet/numfmt.hpp"
#include "poisondet/parallel.hpp"
#include "poisondet/rng.hpp"

using namespace poisondet;

TEST_CASE("fixed6 formatting") {
    CHECK(format_fixed6(0.0) == "0");
    CHECK(format_fixed6(-0.0) == "0");
    CHECK(format_fixed6(64.0) == "64");
    CHECK(format_fixed6(0.1) == "0.1");
    CHECK(format_fixed6(2.5) == "2.5");
    CHECK(format_fixed6(399.99) == "399.99");
    CHECK(format_fixed6(0.50196078) == "0.501961");
    CHECK(format_fixed6(-3.25) == "-3.25");
    CHECK(format_fixed6(1e7) == "10000000");
}

TEST_CASE("quantize6 is idempotent") {
    for (double v : {0.1, 1.0 / 3.0, 123.456789, -0.0000004, 5000.5}) {
        double q = quantize6(v);
        CHECK(quantize6(q) == q);
        CHECK(format_fixed6(q) == format_fixed6(quantize6(q)));
    }
}

TEST_CASE("round half up") {
    CHECK(iround_half_up(2.5) == 3);
    CHECK(iround_half_up(2.4999) == 2);
    CHECK(iround_half_up(0.5) == 1);
    CHECK(iround_half_up(-0.5) == 0);
    CHECK(iround_half_up(183.905) == 184);
}

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // incremental updates agree with one-shot
    Sha256 h;
    std::string long_input(1000, 'a');
    for (int i = 0; i < 1000; ++i) h.update("a");
    CHECK(h.hex_digest() == sha256_hex(long_input));
}

TEST_CASE("uniform_below stays in range and is deterministic") {
    std::mt19937_64 a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        std::uint64_t va = uniform_below(a, 7);
        CHECK(va < 7);
        CHECK(va == uniform_below(b, 7));
    }
}

TEST_CASE("sample_without_replacement basics") {
    std::mt19937_64 rng(7);
    auto s = sample_without_replacement(100, 5, rng);
    CHECK(s.size() == 5);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 5);
    for (auto v : s) CHECK(v < 100);

    std::mt19937_64 rng2(7);
    CHECK(s == sample_without_replacement(100, 5, rng2));

    std::mt19937_64 rng3(7);
    auto all = sample_without_replacement(10, 10, rng3);
    CHECK(all.size() == 10);
    CHECK(all.front() == 0);
    CHECK(all.back() == 9);
}

TEST_CASE("parallel_for covers all indices once per jobs value") {
    for (int jobs : {1, 2, 5}) {
        std::vector<int> hits(1000, 0);
        parallel_for(1000, jobs, [&](int i) { hits[static_cast<std::size_t>(i)] += 1; });
        for (int h : hits) CHECK(h == 1);
    }
}

TEST_CASE("parallel_for propagates exceptions") {
    CHECK_THROWS_AS(parallel_for(10, 4,
                                 [](int i) {
                                     if (i == 3) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
}
