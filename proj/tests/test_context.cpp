#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mcl/context.hpp"

using namespace mcl;

namespace {

const ContextSpace& space() {
    static ContextSpace s = ContextSpace::vehicle_parameters();
    return s;
}

Context ctx_with(const std::string& name, double v) {
    Context c = space().midpoint();
    c.values[space().index_of(name)] = v;
    return c;
}

Context corner(double u) {
    std::vector<double> coords(space().size(), u);
    return denormalize(coords, space());
}

}  // namespace

TEST_CASE("space invariants are enforced at construction") {
    CHECK_THROWS_AS(ContextSpace({{"a", 2.0, 1.0, ParamKind::Continuous}}), ContractError);
    CHECK_THROWS_AS(ContextSpace({{"a", 1.0, 2.5, ParamKind::Integer}}), ContractError);
    CHECK_THROWS_AS(ContextSpace({{"a", 0.0, 1.0, ParamKind::Continuous},
                                  {"a", 0.0, 2.0, ParamKind::Continuous}}),
                    ContractError);
    CHECK(space().size() == 9);
    CHECK(space().param(8).name == "headwayTime");
    CHECK(space().param(8).kind == ParamKind::Integer);
}

TEST_CASE("normalize endpoints and midpoint") {
    std::size_t i = space().index_of("maxSpeed");
    CHECK(normalize(ctx_with("maxSpeed", 3.0), space())[i] == 0.0);
    CHECK(normalize(ctx_with("maxSpeed", 15.0), space())[i] == 1.0);
    CHECK(normalize(ctx_with("maxSpeed", 9.0), space())[i] == 0.5);

    Context short_ctx;
    short_ctx.values = {1.0, 2.0};
    CHECK_THROWS_AS(normalize(short_ctx, space()), ContractError);
}

TEST_CASE("denormalize endpoints and integer rounding") {
    std::vector<double> zeros(space().size(), 0.0), ones(space().size(), 1.0);
    Context lo = denormalize(zeros, space());
    Context hi = denormalize(ones, space());
    for (std::size_t i = 0; i < space().size(); ++i) {
        CHECK(lo.values[i] == space().param(i).lower);
        CHECK(hi.values[i] == space().param(i).upper);
    }

    std::vector<double> half(space().size(), 0.5);
    CHECK(denormalize(half, space()).values[space().index_of("headwayTime")] == 3.0);

    std::vector<double> bad(space().size(), 0.5);
    bad[0] = 1.5;
    CHECK_THROWS_AS(denormalize(bad, space()), OutOfRangeError);
}

TEST_CASE("round-trip through normalized coordinates") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Context c = sample_uniform(space(), rng);
        Context back = denormalize(normalize(c, space()), space());
        for (std::size_t i = 0; i < space().size(); ++i)
            CHECK(back.values[i] == Catch::Approx(c.values[i]).margin(1e-9));
    }
}

TEST_CASE("clamp_and_round clips to the table bounds") {
    std::vector<double> raw = space().midpoint().values;
    raw[space().index_of("maxSpeed")] = 20.0;
    raw[space().index_of("length")] = 0.2;
    raw[space().index_of("headwayTime")] = 2.5;
    Context c = clamp_and_round(raw, space());
    CHECK(c.values[space().index_of("maxSpeed")] == 15.0);
    CHECK(c.values[space().index_of("length")] == 1.0);
    CHECK(c.values[space().index_of("headwayTime")] == 2.0);  // half-to-even

    raw[0] = std::nan("");
    CHECK_THROWS_AS(clamp_and_round(raw, space()), RejectError);
    raw[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(clamp_and_round(raw, space()), RejectError);
}

TEST_CASE("clamp_and_round is idempotent and always yields valid contexts") {
    Rng rng(13);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> raw(space().size());
        for (auto& v : raw) v = rng.uniform(-30.0, 30.0);
        Context once = clamp_and_round(raw, space());
        CHECK(space().contains(once));
        Context twice = clamp_and_round(once.values, space());
        CHECK(once == twice);
    }
}

TEST_CASE("half-to-even rounding") {
    CHECK(round_half_to_even(2.5) == 2.0);
    CHECK(round_half_to_even(3.5) == 4.0);
    CHECK(round_half_to_even(-0.5) == 0.0);
    CHECK(round_half_to_even(2.4) == 2.0);
    CHECK(round_half_to_even(2.6) == 3.0);
}

TEST_CASE("similarity endpoints") {
    Context c = space().midpoint();
    std::vector<Context> window = {c};
    CHECK(similarity(window, c, space()) == 1.0);

    std::vector<Context> lows = {corner(0.0)};
    CHECK(similarity(lows, corner(1.0), space()) == Catch::Approx(0.0).margin(1e-12));

    Rng rng(17);
    Context far = corner(0.0);
    Context cand = sample_uniform(space(), rng);
    std::vector<Context> mixed = {far, cand};
    CHECK(similarity(mixed, cand, space()) == 1.0);  // max over the window

    std::vector<Context> empty;
    CHECK_THROWS_AS(similarity(empty, c, space()), ContractError);
}

TEST_CASE("similarity is symmetric and in [0,1]") {
    Rng rng(19);
    for (int trial = 0; trial < 300; ++trial) {
        Context a = sample_uniform(space(), rng);
        Context b = sample_uniform(space(), rng);
        double ab = similarity(std::vector<Context>{a}, b, space());
        double ba = similarity(std::vector<Context>{b}, a, space());
        CHECK(ab == Catch::Approx(ba).margin(1e-12));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("similarity is invariant to a uniform rescaling of bounds") {
    std::vector<ParameterSpec> scaled_params;
    for (auto p : space().params()) {
        if (p.kind == ParamKind::Continuous) {
            p.lower *= 10.0;
            p.upper *= 10.0;
        }
        scaled_params.push_back(p);
    }
    ContextSpace scaled(scaled_params);

    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        Context a = sample_uniform(space(), rng);
        Context b = sample_uniform(space(), rng);
        Context sa = a, sb = b;
        for (std::size_t i = 0; i < space().size(); ++i) {
            if (space().param(i).kind == ParamKind::Continuous) {
                sa.values[i] *= 10.0;
                sb.values[i] *= 10.0;
            }
        }
        double orig = similarity(std::vector<Context>{a}, b, space());
        double resc = similarity(std::vector<Context>{sa}, sb, scaled);
        CHECK(orig == Catch::Approx(resc).margin(1e-12));
    }
}

TEST_CASE("blend endpoints are exact") {
    Rng rng(29);
    Context a = sample_uniform(space(), rng);
    Context b = sample_uniform(space(), rng);
    CHECK(blend(a, b, 0.0, space()) == b);
    CHECK(blend(a, b, 1.0, space()) == a);

    Context r = ctx_with("maxSpeed", 10.0);
    Context p = ctx_with("maxSpeed", 14.0);
    CHECK(blend(r, p, 0.5, space()).values[space().index_of("maxSpeed")] == 12.0);

    CHECK_THROWS_AS(blend(a, b, -0.1, space()), ContractError);
    CHECK_THROWS_AS(blend(a, b, 1.1, space()), ContractError);
}

TEST_CASE("blending a context with itself is a fixed point") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        Context c = sample_uniform(space(), rng);
        double alpha = rng.uniform();
        CHECK(blend(c, c, alpha, space()) == c);
    }
}

TEST_CASE("blend outputs satisfy the context invariants") {
    Rng rng(37);
    for (int trial = 0; trial < 500; ++trial) {
        Context a = sample_uniform(space(), rng);
        Context b = sample_uniform(space(), rng);
        Context out = blend(a, b, rng.uniform(), space());
        CHECK(space().contains(out));
    }
}

TEST_CASE("uniform sampling stays in bounds and hits the integer lattice") {
    Rng rng(41);
    std::vector<double> lo(space().size(), 1e30), hi(space().size(), -1e30);
    std::array<int, 6> headway_counts{};
    for (int trial = 0; trial < 10000; ++trial) {
        Context c = sample_uniform(space(), rng);
        REQUIRE(space().contains(c));
        for (std::size_t i = 0; i < space().size(); ++i) {
            lo[i] = std::min(lo[i], c.values[i]);
            hi[i] = std::max(hi[i], c.values[i]);
        }
        double h = c.values[space().index_of("headwayTime")];
        CHECK(h == std::floor(h));
        headway_counts[static_cast<std::size_t>(h)] += 1;
    }
    for (std::size_t i = 0; i < space().size(); ++i) {
        CHECK(lo[i] >= space().param(i).lower);
        CHECK(hi[i] <= space().param(i).upper);
        // empirical extremes approach the bounds
        double r = space().param(i).range();
        CHECK(lo[i] < space().param(i).lower + 0.05 * r);
        CHECK(hi[i] > space().param(i).upper - 0.05 * r);
    }
    for (int h = 1; h <= 5; ++h) CHECK(headway_counts[static_cast<std::size_t>(h)] > 0);
    CHECK(headway_counts[0] == 0);

    Rng r1(99), r2(99);
    for (int i = 0; i < 50; ++i)
        CHECK(sample_uniform(space(), r1) == sample_uniform(space(), r2));
}

TEST_CASE("mutate changes at most one component, within the step budget") {
    Context mid = space().midpoint();
    Rng rng(43);
    int exactly_one = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Context m = mutate(mid, space(), 0.1, rng);
        REQUIRE(space().contains(m));
        int diffs = 0;
        for (std::size_t i = 0; i < space().size(); ++i) {
            if (m.values[i] == mid.values[i]) continue;
            ++diffs;
            CHECK(space().param(i).kind == ParamKind::Continuous);
            CHECK(std::abs(m.values[i] - mid.values[i]) <=
                  0.1 * space().param(i).range() + 1e-12);
        }
        CHECK(diffs <= 1);
        if (diffs == 1) ++exactly_one;
    }
    // the integer parameter is picked ~1/9 of the time and its +/-10% nudge
    // always rounds back; everything else moves
    CHECK(exactly_one > 800);

    Context at_upper = space().midpoint();
    for (std::size_t i = 0; i < space().size(); ++i)
        at_upper.values[i] = space().param(i).upper;
    for (int trial = 0; trial < 50; ++trial) {
        Context m = mutate(at_upper, space(), 0.1, rng);
        for (std::size_t i = 0; i < space().size(); ++i)
            CHECK(m.values[i] <= space().param(i).upper);
    }

    Rng r1(7), r2(7);
    CHECK(mutate(mid, space(), 0.1, r1) == mutate(mid, space(), 0.1, r2));
    CHECK_THROWS_AS(mutate(mid, space(), 0.0, rng), ContractError);
}
