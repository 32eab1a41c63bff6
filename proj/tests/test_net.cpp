/*
   Copyright 2026 the sonoseg authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "sonoseg/net.hpp"
#include "sonoseg/phantom.hpp"
#include "test_support.hpp"

using namespace sonoseg;

namespace {

Tensor random_tensor(int nx, int ny, int nz, int nc, std::uint64_t seed, double lo,
                     double hi) {
    Tensor t = Tensor::zeros(nx, ny, nz, nc);
    for (std::size_t i = 0; i < t.v.size(); ++i)
        t.v[i] = rng_uniform(seed, RngStream::test_data, i, 0, lo, hi);
    return t;
}

Tensor random_binary_tensor(int nx, int ny, int nz, std::uint64_t seed, double fg_rate) {
    Tensor t = Tensor::zeros(nx, ny, nz, 1);
    for (std::size_t i = 0; i < t.v.size(); ++i)
        t.v[i] = rng_uniform01(seed, RngStream::test_data, i, 7) < fg_rate ? 1.0 : 0.0;
    return t;
}

/// Parameter count computed directly from the architecture description,
/// independent of the conv layout builder.
std::size_t expected_parameter_count(const NetConfig& c) {
    std::size_t total = 0;
    const auto conv = [](int cin, int cout, int k) {
        return std::size_t(k) * k * k * cin * cout + std::size_t(cout);
    };
    const int width = c.base_channels + c.layers_per_scale * c.growth;
    for (int s = 0; s < c.scales; ++s) {
        total += conv(s == 0 ? c.in_channels : width, c.base_channels, 3);
        for (int l = 0; l < c.layers_per_scale; ++l)
            total += conv(c.base_channels + l * c.growth, c.growth, 3);
    }
    total += conv(c.scales * width, 1, 1);
    return total;
}

NetConfig tiny_config() {
    NetConfig c;
    c.in_channels = 1;
    c.base_channels = 2;
    c.growth = 2;
    c.layers_per_scale = 1;
    c.scales = 2;
    return c;
}

/// Float image with foreground 1 and background 0 from a ball phantom.
struct BallCase {
    Volume3D image;
    Volume3D label;
};

BallCase make_ball_case(std::array<int, 3> dims, const Vec3& center, double radius) {
    BallCase out;
    out.label = make_ball_labels(dims, {1, 1, 1}, center, radius, 1, 0);
    out.image = Volume3D::create(dims, {1, 1, 1}, {0, 0, 0}, Mat3::identity(),
                                 ElementKind::float32);
    const auto& l = out.label.labels();
    auto& f = out.image.floats();
    for (std::size_t i = 0; i < l.size(); ++i) f[i] = l[i] ? 1.0f : 0.0f;
    return out;
}

}  // namespace

TEST_CASE("parameter count matches the architecture term by term") {
    NetConfig a;  // defaults: 1, 8, 8, 2, 3
    REQUIRE(expected_parameter_count(a) == 26281);
    REQUIRE(parameter_count(a) == expected_parameter_count(a));
    REQUIRE(init_network(a, 1).params.size() == expected_parameter_count(a));

    NetConfig b = tiny_config();
    // stem0 27*1*2+2, dense0 27*2*2+2, stem1 27*4*2+2, dense1 27*2*2+2, head 8+1
    REQUIRE(expected_parameter_count(b) == 56u + 110u + 218u + 110u + 9u);
    REQUIRE(parameter_count(b) == expected_parameter_count(b));

    NetConfig no_dense = tiny_config();
    no_dense.layers_per_scale = 0;
    REQUIRE(parameter_count(no_dense) == expected_parameter_count(no_dense));
}

TEST_CASE("initialization is seeded, zero-biased and He-scaled") {
    const NetConfig cfg;  // defaults
    const Network net = init_network(cfg, 31);

    SECTION("biases are exactly zero, weights are not") {
        for (const auto& conv : net.convs) {
            for (int c = 0; c < conv.cout; ++c) REQUIRE(net.params[conv.b_off + c] == 0.0);
            bool any_nonzero = false;
            for (std::size_t i = 0; i < conv.weight_count(); ++i)
                any_nonzero = any_nonzero || net.params[conv.w_off + i] != 0.0;
            REQUIRE(any_nonzero);
        }
    }

    SECTION("weight spread follows sqrt(2 / fan_in)") {
        const auto& conv = net.dense(0, 1);  // cin 16: 3456 weights
        const std::size_t n = conv.weight_count();
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += net.params[conv.w_off + i];
        mean /= double(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = net.params[conv.w_off + i] - mean;
            var += d * d;
        }
        var /= double(n);
        const double expected = std::sqrt(2.0 / (27.0 * conv.cin));
        REQUIRE(std::abs(mean) < 0.01);
        REQUIRE(std::sqrt(var) > 0.85 * expected);
        REQUIRE(std::sqrt(var) < 1.15 * expected);
    }

    SECTION("the seed determines every parameter") {
        REQUIRE(init_network(cfg, 31).params == net.params);
        REQUIRE(init_network(cfg, 32).params != net.params);
    }
}

TEST_CASE("config validation rejects bad settings") {
    const auto bad = [](auto mutate) {
        NetConfig c;
        mutate(c);
        return c;
    };
    REQUIRE_THROWS_AS(bad([](NetConfig& c) { c.in_channels = 0; }).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(bad([](NetConfig& c) { c.base_channels = 0; }).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(bad([](NetConfig& c) { c.growth = 0; }).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(bad([](NetConfig& c) { c.layers_per_scale = -1; }).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(bad([](NetConfig& c) { c.scales = 0; }).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(bad([](NetConfig& c) { c.scales = 7; }).validate(),
                      std::invalid_argument);
}

TEST_CASE("forward produces probabilities on the input grid") {
    NetConfig cfg;
    cfg.base_channels = 4;
    cfg.growth = 2;
    cfg.layers_per_scale = 1;
    cfg.scales = 3;  // dims must be multiples of 4
    const Network net = init_network(cfg, 5);
    const Tensor input = random_tensor(8, 12, 16, 1, 21, 0.0, 1.0);
    const Tensor out = forward(net, input);
    REQUIRE(out.shape == std::array<int, 4>{8, 12, 16, 1});
    for (double p : out.v) {
        REQUIRE(p > 0.0);
        REQUIRE(p < 1.0);
    }

    SECTION("dims not divisible by 2^(scales-1) are rejected") {
        REQUIRE_THROWS_WITH(forward(net, random_tensor(10, 12, 16, 1, 21, 0.0, 1.0)),
                            Catch::Matchers::ContainsSubstring("multiples"));
    }
    SECTION("channel mismatch is rejected") {
        REQUIRE_THROWS_WITH(forward(net, random_tensor(8, 12, 16, 2, 21, 0.0, 1.0)),
                            Catch::Matchers::ContainsSubstring("channel"));
    }
}

TEST_CASE("all-zero parameters output exactly one half") {
    Network net = init_network(tiny_config(), 1);
    std::fill(net.params.begin(), net.params.end(), 0.0);
    const Tensor out = forward(net, random_tensor(8, 8, 8, 1, 3, -2.0, 2.0));
    for (double p : out.v) REQUIRE(p == 0.5);
}

TEST_CASE("forward is covariant under whole-voxel translations") {
    // A compact blob far from every border; with zero biases the activations
    // vanish outside its receptive field, so shifting the blob by a multiple
    // of the scale stride shifts the output bit for bit.
    const Network net = init_network(tiny_config(), 77);
    const int n = 32, shift = 8;
    Tensor a = Tensor::zeros(n, n, n, 1);
    Tensor b = Tensor::zeros(n, n, n, 1);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i) {
                const std::uint64_t key = std::uint64_t(i) + 4 * (j + 4 * k);
                const double v = rng_uniform(9, RngStream::test_data, key, 1, 0.5, 1.5);
                a.at(8 + i, 8 + j, 8 + k, 0) = v;
                b.at(8 + shift + i, 8 + shift + j, 8 + shift + k, 0) = v;
            }
    const Tensor out_a = forward(net, a);
    const Tensor out_b = forward(net, b);

    double max_activity = 0.0;
    for (double p : out_a.v) max_activity = std::max(max_activity, std::abs(p - 0.5));
    REQUIRE(max_activity > 1e-3);  // the blob must actually excite the net

    for (int z = 0; z < n - shift; ++z)
        for (int y = 0; y < n - shift; ++y)
            for (int x = 0; x < n - shift; ++x)
                REQUIRE_THAT(out_b.at(x + shift, y + shift, z + shift, 0),
                             Catch::Matchers::WithinAbs(out_a.at(x, y, z, 0), 1e-12));
}

TEST_CASE("trilinear upsampling matches hand values and its backward is the adjoint") {
    SECTION("1D hand values along x") {
        Tensor in = Tensor::zeros(2, 1, 1, 1);
        in.at(0, 0, 0, 0) = 1.0;
        in.at(1, 0, 0, 0) = 3.0;
        Tensor out;
        detail::upsample_forward(in, out, 2);
        REQUIRE(out.shape == std::array<int, 4>{4, 2, 2, 1});
        // source coords -0.25, 0.25, 0.75, 1.25 clamp to [0, 1]
        REQUIRE(out.at(0, 0, 0, 0) == 1.0);
        REQUIRE(out.at(1, 0, 0, 0) == 0.75 * 1.0 + 0.25 * 3.0);
        REQUIRE(out.at(2, 0, 0, 0) == 0.25 * 1.0 + 0.75 * 3.0);
        REQUIRE(out.at(3, 0, 0, 0) == 3.0);
        // y and z are constant, so rows repeat
        REQUIRE(out.at(1, 1, 1, 0) == out.at(1, 0, 0, 0));
    }

    SECTION("constant fields stay constant under any factor") {
        Tensor in = Tensor::zeros(3, 2, 2, 2);
        std::fill(in.v.begin(), in.v.end(), 2.5);
        Tensor out;
        detail::upsample_forward(in, out, 4);
        REQUIRE(out.shape == std::array<int, 4>{12, 8, 8, 2});
        for (double v : out.v) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(2.5, 1e-15));
    }

    SECTION("backward is the exact adjoint: <up(a), g> == <a, up_T(g)>") {
        const Tensor a = random_tensor(3, 4, 2, 3, 11, -1.0, 1.0);
        const Tensor g = random_tensor(6, 8, 4, 3, 12, -1.0, 1.0);
        Tensor up;
        detail::upsample_forward(a, up, 2);
        Tensor at = Tensor::zeros(3, 4, 2, 3);
        detail::upsample_backward(g, at, 2);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < up.v.size(); ++i) lhs += up.v[i] * g.v[i];
        for (std::size_t i = 0; i < a.v.size(); ++i) rhs += a.v[i] * at.v[i];
        REQUIRE_THAT(lhs, Catch::Matchers::WithinAbs(rhs, 1e-12));
    }
}

TEST_CASE("soft-Dice loss matches hand values") {
    SECTION("single voxel, p one half against a positive target") {
        Tensor p = Tensor::zeros(1, 1, 1, 1);
        p.v = {0.5};
        Tensor t = Tensor::zeros(1, 1, 1, 1);
        t.v = {1.0};
        // D = 2*0.5 / (0.25 + 1) = 0.8, so the loss is 0.2 up to the guard
        const double expected = 1.0 - (2.0 * 0.5 + 1e-5) / (0.25 + 1.0 + 1e-5);
        REQUIRE(soft_dice_loss(p, t) == expected);
        REQUIRE_THAT(soft_dice_loss(p, t), Catch::Matchers::WithinAbs(0.2, 1e-5));
    }
    SECTION("two-voxel fixture with squared sums") {
        Tensor p = Tensor::zeros(2, 1, 1, 1);
        p.v = {0.5, 0.75};
        Tensor t = Tensor::zeros(2, 1, 1, 1);
        t.v = {1.0, 0.0};
        const double expected =
            1.0 - (2.0 * 0.5 + 1e-5) / (0.5 * 0.5 + 0.75 * 0.75 + 1.0 + 1e-5);
        REQUIRE(soft_dice_loss(p, t) == expected);
    }
    SECTION("perfect binary prediction gives exactly zero loss") {
        Tensor p = random_binary_tensor(4, 3, 2, 5, 0.4);
        REQUIRE(soft_dice_loss(p, p) == 0.0);
    }
    SECTION("both empty counts as perfect") {
        const Tensor p = Tensor::zeros(3, 3, 3, 1);
        const Tensor t = Tensor::zeros(3, 3, 3, 1);
        REQUIRE(soft_dice_loss(p, t) == 0.0);
    }
    SECTION("uniform half probabilities on an empty target are nearly worst") {
        Tensor p = Tensor::zeros(4, 4, 4, 1);
        std::fill(p.v.begin(), p.v.end(), 0.5);
        const Tensor t = Tensor::zeros(4, 4, 4, 1);
        REQUIRE(soft_dice_loss(p, t) > 0.999);
    }
    SECTION("the loss stays within [0, 1] on random inputs") {
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor p = random_tensor(3, 3, 3, 1, 100 + trial, 0.001, 0.999);
            const Tensor t = random_binary_tensor(3, 3, 3, 200 + trial, 0.5);
            const double loss = soft_dice_loss(p, t);
            REQUIRE(loss >= 0.0);
            REQUIRE(loss <= 1.0);
        }
    }
    SECTION("shape mismatch is rejected") {
        REQUIRE_THROWS_AS(
            soft_dice_loss(Tensor::zeros(2, 2, 2, 1), Tensor::zeros(2, 2, 1, 1)),
            std::invalid_argument);
    }
}

TEST_CASE("soft-Dice gradient matches central differences") {
    Tensor p = random_tensor(4, 3, 2, 1, 31, 0.05, 0.95);
    const Tensor t = random_binary_tensor(4, 3, 2, 32, 0.4);
    Tensor grad;
    soft_dice_loss(p, t, &grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.v.size(); ++i) {
        const double saved = p.v[i];
        p.v[i] = saved + h;
        const double lp = soft_dice_loss(p, t);
        p.v[i] = saved - h;
        const double lm = soft_dice_loss(p, t);
        p.v[i] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        REQUIRE(std::abs(grad.v[i] - numeric) <=
                1e-9 + 1e-4 * std::max(std::abs(grad.v[i]), std::abs(numeric)));
    }
}

TEST_CASE("full-network gradient matches central differences on every parameter") {
    Network net = init_network(tiny_config(), 3);
    const Tensor input = random_tensor(8, 8, 8, 1, 41, 0.0, 1.0);
    const Tensor target = random_binary_tensor(8, 8, 8, 42, 0.3);

    const LossAndGrad lg = backward(net, input, target);
    REQUIRE(lg.loss > 0.0);
    REQUIRE(lg.loss < 1.0);
    REQUIRE(lg.grad.size() == net.params.size());

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        const double saved = net.params[i];
        net.params[i] = saved + h;
        const double lp = soft_dice_loss(forward(net, input), target);
        net.params[i] = saved - h;
        const double lm = soft_dice_loss(forward(net, input), target);
        net.params[i] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double err = std::abs(lg.grad[i] - numeric);
        const double bound = 1e-6 + 1e-3 * std::max(std::abs(lg.grad[i]), std::abs(numeric));
        worst = std::max(worst, err - bound);
        INFO("parameter " << i);
        REQUIRE(err <= bound);
    }
    REQUIRE(worst <= 0.0);
}

TEST_CASE("Adam takes the bias-corrected first step and minimizes a quadratic") {
    SECTION("first step hand value at the default learning rate") {
        std::vector<double> params{0.0};
        const std::vector<double> grad{1.0};
        AdamState state = AdamState::for_params(1);  // lr 2e-5
        adam_step(params, grad, state);

        // m-hat and v-hat are exactly 1 after one unit-gradient step
        const double expected = 0.0 - state.lr * 1.0 / (1.0 + state.epsilon);
        REQUIRE(params[0] == expected);
        REQUIRE(state.t == 1);
        REQUIRE_THAT(params[0], Catch::Matchers::WithinAbs(-2e-5, 1e-12));
    }

    SECTION("bias correction keeps the first step near -lr at any gradient scale") {
        std::vector<double> params{1.0};
        AdamState state = AdamState::for_params(1);
        adam_step(params, {0.5}, state);
        const double c1 = 1.0 - std::pow(state.beta1, 1.0);
        const double c2 = 1.0 - std::pow(state.beta2, 1.0);
        const double m = (1.0 - state.beta1) * 0.5;
        const double v = (1.0 - state.beta2) * 0.25;
        const double expected = 1.0 - state.lr * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
        REQUIRE(params[0] == expected);
        REQUIRE_THAT(params[0], Catch::Matchers::WithinAbs(1.0 - state.lr, 1e-9));
    }

    SECTION("zero gradient leaves parameters unchanged but advances t") {
        std::vector<double> params{0.25, -3.5};
        AdamState state = AdamState::for_params(2);
        adam_step(params, {0.0, 0.0}, state);
        REQUIRE(params == std::vector<double>{0.25, -3.5});
        REQUIRE(state.t == 1);
    }

    SECTION("descends a quadratic to its minimum") {
        std::vector<double> p{0.0};
        AdamState state = AdamState::for_params(1);
        state.lr = 0.05;
        double prev = (p[0] - 3.0) * (p[0] - 3.0);
        for (int i = 0; i < 4000; ++i) {
            const std::vector<double> grad{2.0 * (p[0] - 3.0)};
            adam_step(p, grad, state);
            if (i < 2) {  // early steps strictly decrease the objective
                const double cur = (p[0] - 3.0) * (p[0] - 3.0);
                REQUIRE(cur < prev);
                prev = cur;
            }
        }
        REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(3.0, 1e-2));
    }

    SECTION("size mismatch and non-finite gradients are rejected") {
        std::vector<double> p{0.0, 1.0};
        AdamState short_state = AdamState::for_params(1);
        REQUIRE_THROWS_AS(adam_step(p, {1.0, 1.0}, short_state), std::invalid_argument);
        AdamState state = AdamState::for_params(2);
        REQUIRE_THROWS_WITH(
            adam_step(p, {1.0, std::numeric_limits<double>::quiet_NaN()}, state),
            Catch::Matchers::ContainsSubstring("non-finite"));
    }
}

TEST_CASE("training reduces the loss when overfitting one case") {
    NetConfig cfg;
    cfg.base_channels = 4;
    cfg.growth = 4;
    cfg.layers_per_scale = 1;
    cfg.scales = 2;
    Network net = init_network(cfg, 17);

    BallCase ball = make_ball_case({16, 16, 16}, {7.5, 7.5, 7.5}, 4.5);
    TrainSchedule schedule;
    schedule.phases = {{"overfit", 150, 1, 3e-3, false}};
    schedule.seed = 9;
    const DatasetMap data{{"overfit", {{"ball", ball.image, ball.label}}}};

    TrainOptions opt;
    opt.patch.patch_dims = {16, 16, 16};

    const TrainLog log = train(net, schedule, data, opt);
    REQUIRE(log.size() == 150);
    const auto mean_of = [&](std::size_t from, std::size_t to) {
        double s = 0.0;
        for (std::size_t i = from; i < to; ++i) s += log[i].loss;
        return s / double(to - from);
    };
    const double head = mean_of(0, 10);
    const double tail = mean_of(log.size() - 10, log.size());
    REQUIRE(tail < head - 0.1);
    REQUIRE(log.front().phase == "overfit");
    REQUIRE(log.back().iteration == 149);
}

TEST_CASE("phase sequences compose exactly") {
    const NetConfig cfg = tiny_config();
    BallCase a = make_ball_case({8, 8, 8}, {3.5, 3.5, 3.5}, 2.5);
    BallCase b = make_ball_case({8, 8, 8}, {4.5, 4.5, 4.5}, 2.0);

    const DatasetMap data{{"sim", {{"a", a.image, a.label}, {"b", b.image, b.label}}},
                          {"real", {{"b", b.image, b.label}}}};
    const TrainPhase pre{"sim", 8, 2, 1e-3, true};
    const TrainPhase fine{"real", 6, 2, 5e-4, false};

    TrainOptions opt;
    opt.patch.patch_dims = {8, 8, 8};

    Network joint = init_network(cfg, 42);
    TrainSchedule both;
    both.phases = {pre, fine};
    both.seed = 777;
    const TrainLog joint_log = train(joint, both, data, opt);

    Network split = init_network(cfg, 42);
    TrainSchedule first;
    first.phases = {pre};
    first.seed = 777;
    TrainSchedule second;
    second.phases = {fine};
    second.seed = 777;
    TrainLog split_log = train(split, first, data, opt);
    const TrainLog fine_log = train(split, second, data, opt);
    split_log.insert(split_log.end(), fine_log.begin(), fine_log.end());

    REQUIRE(joint.params == split.params);  // bitwise: fine-tuning == phase two
    REQUIRE(joint_log.size() == split_log.size());
    for (std::size_t i = 0; i < joint_log.size(); ++i) {
        REQUIRE(joint_log[i].loss == split_log[i].loss);
        REQUIRE(joint_log[i].phase == split_log[i].phase);
        REQUIRE(joint_log[i].iteration == split_log[i].iteration);
    }
}

TEST_CASE("training is invariant to the thread count") {
    const NetConfig cfg = tiny_config();
    BallCase ball = make_ball_case({8, 8, 8}, {3.5, 3.5, 3.5}, 2.5);
    TrainSchedule schedule;
    schedule.phases = {{"ball", 6, 1, 1e-3, false}};
    schedule.seed = 5;
    const DatasetMap data{{"ball", {{"ball", ball.image, ball.label}}}};
    TrainOptions opt;
    opt.patch.patch_dims = {8, 8, 8};

    set_thread_count(1);
    Network serial = init_network(cfg, 7);
    train(serial, schedule, data, opt);

    set_thread_count(4);
    Network threaded = init_network(cfg, 7);
    train(threaded, schedule, data, opt);
    set_thread_count(1);

    REQUIRE(serial.params == threaded.params);
}

TEST_CASE("training validates its inputs") {
    Network net = init_network(tiny_config(), 1);
    TrainOptions opt;
    opt.patch.patch_dims = {8, 8, 8};
    BallCase ball = make_ball_case({8, 8, 8}, {3.5, 3.5, 3.5}, 2.5);
    const DatasetMap data{{"ball", {{"ball", ball.image, ball.label}}},
                          {"swapped", {{"x", ball.label, ball.label}}},
                          {"empty", {}}};

    const auto one_phase = [](TrainPhase p) {
        TrainSchedule s;
        s.phases = {p};
        return s;
    };
    REQUIRE_THROWS_WITH(train(net, one_phase({"missing", 1, 1, 1e-3, false}), data, opt),
                        Catch::Matchers::ContainsSubstring("unknown dataset"));
    REQUIRE_THROWS_WITH(train(net, one_phase({"empty", 1, 1, 1e-3, false}), data, opt),
                        Catch::Matchers::ContainsSubstring("no cases"));
    REQUIRE_THROWS_AS(train(net, one_phase({"swapped", 1, 1, 1e-3, false}), data, opt),
                      std::invalid_argument);  // image must be float
    REQUIRE_THROWS_AS(train(net, one_phase({"ball", 0, 1, 1e-3, false}), data, opt),
                      std::invalid_argument);  // zero iterations
    REQUIRE_THROWS_AS(train(net, one_phase({"ball", 1, 0, 1e-3, false}), data, opt),
                      std::invalid_argument);  // zero batch
    REQUIRE_THROWS_AS(train(net, TrainSchedule{}, data, opt), std::invalid_argument);
}

TEST_CASE("the loss curve CSV lists one row per iteration") {
    Network net = init_network(tiny_config(), 1);
    BallCase ball = make_ball_case({8, 8, 8}, {3.5, 3.5, 3.5}, 2.5);
    TrainSchedule schedule;
    schedule.phases = {{"demo", 4, 1, 2e-5, false}};
    schedule.seed = 3;
    const DatasetMap data{{"demo", {{"ball", ball.image, ball.label}}}};
    TrainOptions opt;
    opt.patch.patch_dims = {8, 8, 8};
    const TrainLog log = train(net, schedule, data, opt);

    const std::string csv = train_log_to_csv(log);
    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "iteration,phase,loss");
    for (int i = 0; i < 4; ++i) {
        REQUIRE(std::getline(in, line));
        std::istringstream row(line);
        std::string iter, phase_name, loss;
        std::getline(row, iter, ',');
        std::getline(row, phase_name, ',');
        std::getline(row, loss, ',');
        REQUIRE(std::stoi(iter) == i);
        REQUIRE(phase_name == "demo");
        REQUIRE(std::stod(loss) == log[std::size_t(i)].loss);
    }
    REQUIRE_FALSE(std::getline(in, line));
}

TEST_CASE("prediction with an all-zero network is one half everywhere") {
    Network net = init_network(tiny_config(), 1);
    std::fill(net.params.begin(), net.params.end(), 0.0);

    // 13 x 6 x 11: overlapping windows along x and z, zero padding along y
    Volume3D image = Volume3D::create({13, 6, 11}, {0.4, 0.5, 0.6}, {1, 2, 3},
                                      axis_rotation_deg(2, 90), ElementKind::float32);
    auto& f = image.floats();
    for (std::size_t i = 0; i < f.size(); ++i)
        f[i] = float(rng_uniform01(77, RngStream::test_data, i, 2));

    const Volume3D prob = predict_probabilities(net, image, {8, 8, 8}, 0.5);
    REQUIRE(prob.dims() == image.dims());
    REQUIRE(prob.spacing() == image.spacing());
    REQUIRE(prob.origin() == image.origin());
    REQUIRE(prob.direction() == image.direction());
    for (float p : prob.floats()) REQUIRE(p == 0.5f);

    SECTION("tilings with overlap 0 and 0.5 give identical binary maps") {
        const Volume3D none = predict_volume(net, image, {8, 8, 8}, 0.0);
        const Volume3D half = predict_volume(net, image, {8, 8, 8}, 0.5);
        REQUIRE(none.labels() == half.labels());
        for (std::uint8_t m : none.labels()) REQUIRE(m == 1);  // 0.5 >= threshold
    }
}

TEST_CASE("prediction on an exact-size volume equals a single forward pass") {
    const Network net = init_network(tiny_config(), 13);
    Volume3D image = Volume3D::create({8, 8, 8}, {1, 1, 1}, {0, 0, 0}, Mat3::identity(),
                                      ElementKind::float32);
    auto& f = image.floats();
    for (std::size_t i = 0; i < f.size(); ++i)
        f[i] = float(rng_uniform01(78, RngStream::test_data, i, 3));

    const Volume3D prob = predict_probabilities(net, image, {8, 8, 8});
    Tensor input = Tensor::zeros(8, 8, 8, 1);
    for (std::size_t i = 0; i < f.size(); ++i) input.v[i] = f[i];
    const Tensor direct = forward(net, input);
    for (std::size_t i = 0; i < direct.v.size(); ++i)
        REQUIRE(prob.floats()[i] == float(direct.v[i]));

    SECTION("the binary prediction is the thresholded forward pass") {
        const Volume3D mask = predict_volume(net, image, {8, 8, 8});
        for (std::size_t i = 0; i < direct.v.size(); ++i)
            REQUIRE(mask.labels()[i] == (float(direct.v[i]) >= 0.5f ? 1 : 0));
    }

    SECTION("bad patch dims, kinds, overlap and threshold are rejected") {
        REQUIRE_THROWS_AS(predict_volume(net, image, {7, 8, 8}), std::invalid_argument);
        Volume3D labels = Volume3D::create({8, 8, 8}, {1, 1, 1}, {0, 0, 0},
                                           Mat3::identity(), ElementKind::uint8);
        REQUIRE_THROWS_AS(predict_volume(net, labels, {8, 8, 8}), std::invalid_argument);
        REQUIRE_THROWS_AS(predict_volume(net, image, {8, 8, 8}, 1.0), std::invalid_argument);
        REQUIRE_THROWS_AS(predict_volume(net, image, {8, 8, 8}, 0.25, 0.0),
                          std::invalid_argument);
    }
}

TEST_CASE("binarizing probabilities thresholds at one half by default") {
    Volume3D prob = Volume3D::create({3, 1, 1}, {1, 1, 1}, {0, 0, 0}, Mat3::identity(),
                                     ElementKind::float32);
    prob.floats() = {0.2f, 0.5f, 0.7f};
    const Volume3D mask = binarize_probabilities(prob);
    REQUIRE(mask.labels() == std::vector<std::uint8_t>{0, 1, 1});
    const Volume3D strict = binarize_probabilities(prob, 0.6);
    REQUIRE(strict.labels() == std::vector<std::uint8_t>{0, 0, 1});
}

TEST_CASE("checkpoints round-trip the network and optimizer state") {
    testsupport::TempDir dir("ckpt");
    NetConfig cfg;
    cfg.base_channels = 3;
    cfg.growth = 2;
    cfg.layers_per_scale = 1;
    cfg.scales = 2;
    Network net = init_network(cfg, 8);

    AdamState state = AdamState::for_params(net.params.size());
    state.lr = 1e-4;
    std::vector<double> grad(net.params.size());
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = 0.01 * double(i % 5);
    adam_step(net.params, grad, state);

    const auto path = dir.path() / "model.ckpt";
    save_checkpoint(path, net, &state);
    const Checkpoint ck = load_checkpoint(path);

    REQUIRE(ck.net.config == cfg);
    REQUIRE(ck.net.params.size() == net.params.size());
    for (std::size_t i = 0; i < net.params.size(); ++i)
        REQUIRE(ck.net.params[i] == double(float(net.params[i])));
    REQUIRE(ck.adam.has_value());
    REQUIRE(ck.adam->t == 1);
    REQUIRE(ck.adam->lr == 1e-4);
    REQUIRE(ck.adam->beta1 == 0.9);
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        REQUIRE(ck.adam->m[i] == double(float(state.m[i])));
        REQUIRE(ck.adam->v[i] == double(float(state.v[i])));
    }

    SECTION("without optimizer state") {
        const auto bare = dir.path() / "bare.ckpt";
        save_checkpoint(bare, net);
        REQUIRE_FALSE(load_checkpoint(bare).adam.has_value());
    }

    SECTION("a reloaded network still predicts") {
        const Tensor out = forward(ck.net, random_tensor(8, 8, 8, 1, 9, 0.0, 1.0));
        REQUIRE(out.shape == std::array<int, 4>{8, 8, 8, 1});
    }

    SECTION("error cases") {
        REQUIRE_THROWS_WITH(load_checkpoint(dir.path() / "nope.ckpt"),
                            Catch::Matchers::ContainsSubstring("missing"));

        const auto garbage = dir.path() / "garbage.ckpt";
        std::ofstream(garbage) << "this is not a checkpoint at all";
        REQUIRE_THROWS_WITH(load_checkpoint(garbage),
                            Catch::Matchers::ContainsSubstring("not a checkpoint"));

        const auto cut = dir.path() / "cut.ckpt";
        std::filesystem::copy_file(path, cut);
        std::filesystem::resize_file(cut, std::filesystem::file_size(cut) - 64);
        REQUIRE_THROWS_WITH(load_checkpoint(cut),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }
}

TEST_CASE("net config JSON round trip") {
    NetConfig cfg;
    cfg.in_channels = 2;
    cfg.base_channels = 6;
    cfg.growth = 3;
    cfg.layers_per_scale = 4;
    cfg.scales = 2;
    REQUIRE(net_config_from_json(net_config_to_json(cfg)) == cfg);
    nlohmann::json bad = net_config_to_json(cfg);
    bad["scales"] = 0;
    REQUIRE_THROWS_AS(net_config_from_json(bad), std::invalid_argument);
}

TEST_CASE("train schedule JSON round trip") {
    TrainSchedule s;
    s.phases = {{"sim", 100, 4, 1e-3, true}, {"real", 50, 8, 2e-5, false}};
    s.seed = 31;
    const TrainSchedule back = train_schedule_from_json(train_schedule_to_json(s));
    REQUIRE(back.seed == 31);
    REQUIRE(back.phases.size() == 2);
    REQUIRE(back.phases[0].dataset_id == "sim");
    REQUIRE(back.phases[0].iterations == 100);
    REQUIRE(back.phases[0].batch_size == 4);
    REQUIRE(back.phases[0].lr == 1e-3);
    REQUIRE(back.phases[0].augment);
    REQUIRE(back.phases[1].dataset_id == "real");
    REQUIRE_FALSE(back.phases[1].augment);

    nlohmann::json bad = train_schedule_to_json(s);
    bad["phases"][0]["iterations"] = 0;
    REQUIRE_THROWS_AS(train_schedule_from_json(bad), std::invalid_argument);
}
