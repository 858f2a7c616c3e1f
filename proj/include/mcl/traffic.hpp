#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcl/context.hpp"
#include "mcl/error.hpp"
#include "mcl/rng.hpp"

namespace mcl {

struct NetworkSpec {
    int rows = 1;
    int cols = 1;
    int lanes_per_approach = 3;
    double link_length = 150.0;  // m
    double sim_dt = 1.0;         // s
    double spawn_rate = 0.05;    // vehicles/s per entry lane
    int episode_len = 360;       // timesteps
    double turn_prob = 0.1;      // per intersection, split evenly left/right
    double lambda_f = 0.033;     // reward weight on moving time
    double lambda_w = 0.0;       // reward weight on waiting time

    void validate() const {
        if (rows < 1 || cols < 1) throw ConfigError("grid must be at least 1x1");
        if (lanes_per_approach < 1) throw ConfigError("lanes_per_approach must be >= 1");
        if (!(link_length > 0.0)) throw ConfigError("link_length must be > 0");
        if (!(sim_dt > 0.0)) throw ConfigError("sim_dt must be > 0");
        if (!(spawn_rate >= 0.0)) throw ConfigError("spawn_rate must be >= 0");
        if (episode_len < 1) throw ConfigError("episode_len must be >= 1");
        if (!(turn_prob >= 0.0 && turn_prob <= 1.0))
            throw ConfigError("turn_prob outside [0,1]");
    }
};

// travel direction of a vehicle on a link
enum class Dir : int { North = 0, East = 1, South = 2, West = 3 };
enum class Move : int { Left = 0, Through = 1, Right = 2 };

inline Dir turn_direction(Dir d, Move m) {
    int di = static_cast<int>(d);
    switch (m) {
        case Move::Through: return d;
        case Move::Right: return static_cast<Dir>((di + 1) % 4);
        case Move::Left: return static_cast<Dir>((di + 3) % 4);
    }
    return d;
}

inline Move movement_between(Dir from, Dir to) {
    int delta = (static_cast<int>(to) - static_cast<int>(from) + 4) % 4;
    if (delta == 0) return Move::Through;
    if (delta == 1) return Move::Right;
    if (delta == 3) return Move::Left;
    throw ContractError("U-turns are not part of the movement set");
}

// One signal phase: two protected (travel-direction, movement) groups.
// Right turns are permitted in every phase.
struct Phase {
    int id = 0;
    std::pair<std::pair<Dir, Move>, std::pair<Dir, Move>> permitted;
};

inline constexpr int kNumPhases = 8;

inline const std::array<Phase, 8>& phase_table() {
    static const std::array<Phase, 8> table = {{
        {0, {{Dir::South, Move::Through}, {Dir::North, Move::Through}}},
        {1, {{Dir::East, Move::Through}, {Dir::West, Move::Through}}},
        {2, {{Dir::South, Move::Left}, {Dir::North, Move::Left}}},
        {3, {{Dir::East, Move::Left}, {Dir::West, Move::Left}}},
        {4, {{Dir::South, Move::Through}, {Dir::South, Move::Left}}},
        {5, {{Dir::North, Move::Through}, {Dir::North, Move::Left}}},
        {6, {{Dir::East, Move::Through}, {Dir::East, Move::Left}}},
        {7, {{Dir::West, Move::Through}, {Dir::West, Move::Left}}},
    }};
    return table;
}

inline bool movement_allowed(int phase_id, Dir dir, Move move) {
    if (move == Move::Right) return true;
    const Phase& p = phase_table()[static_cast<std::size_t>(phase_id)];
    return (p.permitted.first == std::pair{dir, move}) ||
           (p.permitted.second == std::pair{dir, move});
}

struct Vehicle {
    int id = 0;
    int link = -1;
    int lane = 0;
    double position = 0.0;  // front bumper, m from link start
    double speed = 0.0;
    std::vector<int> route;  // link ids, entry to exit
    int route_pos = 0;
    long long spawn_step = 0;
    double route_length = 0.0;
    double ideal_travel_time = 0.0;  // route_length / maxSpeed
    double wait_time = 0.0;          // accumulated seconds at or below kStoppedSpeed
};

struct CompletedVehicle {
    int id = 0;
    long long spawn_step = 0;
    long long finish_step = 0;
    double wait_time = 0.0;
    double ideal_travel_time = 0.0;
};

struct EpisodeMetrics {
    double avg_travel_time = 0.0;
    double throughput = 0.0;
    double avg_wait_time = 0.0;
    double avg_delay = 0.0;
    double episode_return = 0.0;
    bool degenerate = false;  // no vehicle completed its route

    bool operator==(const EpisodeMetrics&) const = default;
};

inline double compute_reward(double delta_moving_time, double delta_waiting_time,
                             double lambda_f, double lambda_w) {
    return lambda_f * delta_moving_time + lambda_w * delta_waiting_time;
}

// speed at or below this counts as stationary for waiting time and queues
inline constexpr double kStoppedSpeed = 0.1;

namespace detail {

struct LinkInfo {
    int id = -1;
    int from_node = -1;  // -1 = boundary entry
    int to_node = -1;    // -1 = boundary exit
    Dir dir = Dir::North;
};

struct SpawnEvent {
    long long step = 0;
    int entry_link = -1;
    std::vector<int> route;
};

// Krauss safe speed: approach a (possibly moving) constraint so that comfort
// braking b covers the free distance within reaction time tau.
inline double safe_speed(double free_gap, double leader_speed, double tau, double b) {
    double d = std::max(free_gap, 0.0);
    double bt = b * tau;
    return std::max(0.0, -bt + std::sqrt(bt * bt + leader_speed * leader_speed +
                                         2.0 * b * d));
}

// Largest speed from which a standing target at distance g is reachable with
// comfort braking b in discrete time: v + (v-b) + (v-2b) + ... <= g. Unlike
// the continuous Krauss curve this closes the final meters in finitely many
// steps, so queues come to an actual standstill instead of creeping.
inline double max_stop_speed(double g, double b, double dt) {
    g = std::max(g, 0.0);
    double best = 0.0;
    double bd = b * dt;
    for (int k = 0; k < 256; ++k) {
        double v = g / (static_cast<double>(k + 1) * dt) + bd * static_cast<double>(k) / 2.0;
        if (v >= static_cast<double>(k) * bd - 1e-12 &&
            v <= static_cast<double>(k + 1) * bd + 1e-12) {
            best = std::max(best, v);
        }
        if (static_cast<double>(k) * bd > g / dt + bd) break;
    }
    return best;
}

}  // namespace detail

// Grid of signalized intersections; one agent per intersection, 8 phase
// actions, vehicle dynamics driven entirely by the context parameters.
// Context changes alter only the dynamics, never the observation/action
// layout or the reward definition.
class TrafficSim {
public:
    TrafficSim(const NetworkSpec& net, const Context& ctx, const ContextSpace& space,
               std::uint64_t seed)
        : net_(net) {
        net_.validate();
        space.check(ctx);
        veh_length_ = ctx.values[space.index_of("length")];
        max_pos_acc_ = ctx.values[space.index_of("maxPosAcc")];
        max_neg_acc_ = ctx.values[space.index_of("maxNegAcc")];
        usual_pos_acc_ = ctx.values[space.index_of("usualPosAcc")];
        usual_neg_acc_ = ctx.values[space.index_of("usualNegAcc")];
        min_gap_ = ctx.values[space.index_of("minGap")];
        max_speed_ = ctx.values[space.index_of("maxSpeed")];
        headway_time_ = ctx.values[space.index_of("headwayTime")];
        // usual* are driver defaults, max* the physical limits
        accel_ = std::min(usual_pos_acc_, max_pos_acc_);
        brake_ = std::min(usual_neg_acc_, max_neg_acc_);

        if (net_.link_length <= veh_length_ + min_gap_)
            throw ConfigError("link_length must exceed vehicle length + minGap");
        if (net_.link_length <= max_speed_ * net_.sim_dt)
            throw ConfigError("link_length must exceed maxSpeed * sim_dt");

        build_network();
        phases_.assign(static_cast<std::size_t>(num_agents()), 0);
        generate_schedule(seed);
    }

    int num_agents() const { return net_.rows * net_.cols; }
    int obs_dim() const { return 4 * (2 * 4 * net_.lanes_per_approach) + kNumPhases; }
    int timestep() const { return timestep_; }
    bool done() const { return timestep_ >= net_.episode_len; }
    const NetworkSpec& spec() const { return net_; }

    long long spawned_count() const { return spawned_; }
    long long completed_count() const { return static_cast<long long>(completed_.size()); }
    long long active_count() const { return static_cast<long long>(active_.size()); }
    double total_moving_time() const { return moving_time_; }
    double total_waiting_time() const { return waiting_time_; }
    double vehicle_length() const { return veh_length_; }
    double max_speed() const { return max_speed_; }
    double min_gap() const { return min_gap_; }

    std::vector<const Vehicle*> active_vehicles() const {
        std::vector<const Vehicle*> out;
        out.reserve(active_.size());
        for (int id : active_) out.push_back(&vehicles_[static_cast<std::size_t>(id)]);
        return out;
    }

    int num_links() const { return static_cast<int>(links_.size()); }
    const std::vector<int>& lane_order(int link, int lane) const {
        return lanes_[static_cast<std::size_t>(link)][static_cast<std::size_t>(lane)];
    }
    const Vehicle& vehicle(int id) const { return vehicles_[static_cast<std::size_t>(id)]; }
    const std::vector<CompletedVehicle>& completed() const { return completed_; }
    const std::vector<int>& entry_links() const { return entry_links_; }
    Dir link_dir(int id) const { return links_[static_cast<std::size_t>(id)].dir; }

    // deterministic-flow hooks; only usable before the first step
    void clear_spawn_schedule() {
        if (timestep_ != 0) throw ContractError("schedule is frozen after the first step");
        schedule_.clear();
        schedule_pos_ = 0;
    }

    // queue a single vehicle with an all-through route from an entry link
    void add_scheduled_spawn(long long step, int entry_link) {
        if (timestep_ != 0) throw ContractError("schedule is frozen after the first step");
        detail::SpawnEvent ev;
        ev.step = step;
        ev.entry_link = entry_link;
        ev.route.push_back(entry_link);
        int cur = entry_link;
        while (links_[static_cast<std::size_t>(cur)].to_node >= 0) {
            int node = links_[static_cast<std::size_t>(cur)].to_node;
            Dir dir = links_[static_cast<std::size_t>(cur)].dir;
            cur = outgoing_[static_cast<std::size_t>(node)]
                           [static_cast<std::size_t>(static_cast<int>(dir))];
            ev.route.push_back(cur);
        }
        schedule_.push_back(std::move(ev));
        std::stable_sort(schedule_.begin(), schedule_.end(),
                         [](const detail::SpawnEvent& a, const detail::SpawnEvent& b) {
                             return a.step < b.step;
                         });
    }

    std::vector<double> observe(int agent) const {
        std::vector<double> obs;
        obs.reserve(static_cast<std::size_t>(obs_dim()));
        for (int d = 0; d < 4; ++d)
            push_lane_features(obs, incoming_[static_cast<std::size_t>(agent)]
                                             [static_cast<std::size_t>(d)]);
        for (int d = 0; d < 4; ++d)
            push_lane_features(obs, outgoing_[static_cast<std::size_t>(agent)]
                                             [static_cast<std::size_t>(d)]);
        for (int p = 0; p < kNumPhases; ++p)
            obs.push_back(phases_[static_cast<std::size_t>(agent)] == p ? 1.0 : 0.0);
        return obs;
    }

    std::vector<std::vector<double>> observe_all() const {
        std::vector<std::vector<double>> out;
        out.reserve(static_cast<std::size_t>(num_agents()));
        for (int a = 0; a < num_agents(); ++a) out.push_back(observe(a));
        return out;
    }

    struct StepResult {
        double reward = 0.0;
        bool done = false;
    };

    StepResult step(std::span<const int> actions) {
        if (static_cast<int>(actions.size()) != num_agents())
            throw ContractError("step: one action per agent required");
        for (int a : actions)
            if (a < 0 || a >= kNumPhases)
                throw ContractError("step: phase action outside 0..7");
        for (int i = 0; i < num_agents(); ++i)
            phases_[static_cast<std::size_t>(i)] = actions[static_cast<std::size_t>(i)];

        plan_speeds();
        double moving_before = moving_time_, waiting_before = waiting_time_;
        execute_moves();
        process_spawns();
        timestep_ += 1;

        StepResult r;
        r.reward = compute_reward(moving_time_ - moving_before,
                                  waiting_time_ - waiting_before, net_.lambda_f,
                                  net_.lambda_w);
        episode_return_ += r.reward;
        r.done = done();
        return r;
    }

    EpisodeMetrics finalize_metrics() const {
        EpisodeMetrics m;
        m.episode_return = episode_return_;
        m.throughput = static_cast<double>(completed_.size());
        if (completed_.empty()) {
            m.degenerate = true;
            return m;
        }
        double travel = 0.0, wait = 0.0, delay = 0.0;
        for (const auto& c : completed_) {
            double actual = static_cast<double>(c.finish_step - c.spawn_step) * net_.sim_dt;
            travel += actual;
            wait += c.wait_time;
            delay += actual - c.ideal_travel_time;
        }
        double n = static_cast<double>(completed_.size());
        m.avg_travel_time = travel / n;
        m.avg_wait_time = wait / n;
        m.avg_delay = delay / n;
        return m;
    }

    // trace rows: t, agent, phase, queue length per incoming lane
    void write_trace(std::string& out) const {
        for (int a = 0; a < num_agents(); ++a) {
            out += std::to_string(timestep_) + "," + std::to_string(a) + "," +
                   std::to_string(phases_[static_cast<std::size_t>(a)]);
            for (int d = 0; d < 4; ++d) {
                int link = incoming_[static_cast<std::size_t>(a)][static_cast<std::size_t>(d)];
                for (std::size_t lane = 0;
                     lane < lanes_[static_cast<std::size_t>(link)].size(); ++lane) {
                    int q = 0;
                    for (int id : lanes_[static_cast<std::size_t>(link)][lane])
                        if (vehicles_[static_cast<std::size_t>(id)].speed <= kStoppedSpeed)
                            ++q;
                    out += "," + std::to_string(q);
                }
            }
            out += "\n";
        }
    }

private:
    struct PlannedMove {
        int vehicle = -1;
        int target_link = -1;
        int target_lane = 0;
        double desired_pos = 0.0;
    };

    int node_id(int r, int c) const { return r * net_.cols + c; }

    void push_lane_features(std::vector<double>& obs, int link) const {
        for (std::size_t lane = 0; lane < lanes_[static_cast<std::size_t>(link)].size();
             ++lane) {
            const auto& order = lanes_[static_cast<std::size_t>(link)][lane];
            double queue = 0.0, speed_sum = 0.0, head = 0.0;
            for (int id : order) {
                const Vehicle& v = vehicles_[static_cast<std::size_t>(id)];
                if (v.speed <= kStoppedSpeed) queue += 1.0;
                speed_sum += v.speed;
            }
            if (!order.empty())
                head = vehicles_[static_cast<std::size_t>(order.front())].position /
                       net_.link_length;
            double count = static_cast<double>(order.size());
            obs.push_back(count);
            obs.push_back(queue);
            obs.push_back(order.empty() ? 0.0 : speed_sum / count / max_speed_);
            obs.push_back(head);
        }
    }

    void build_network() {
        auto neighbor = [&](int r, int c, Dir d, int& nr, int& nc) {
            nr = r;
            nc = c;
            switch (d) {
                case Dir::North: nr = r - 1; break;
                case Dir::South: nr = r + 1; break;
                case Dir::East: nc = c + 1; break;
                case Dir::West: nc = c - 1; break;
            }
        };
        auto inside = [&](int r, int c) {
            return r >= 0 && r < net_.rows && c >= 0 && c < net_.cols;
        };

        incoming_.assign(static_cast<std::size_t>(num_agents()),
                         std::array<int, 4>{-1, -1, -1, -1});
        outgoing_.assign(static_cast<std::size_t>(num_agents()),
                         std::array<int, 4>{-1, -1, -1, -1});

        // every (node, travel dir) pair gets an incoming link; interior links
        // double as the upstream node's outgoing link
        for (int r = 0; r < net_.rows; ++r) {
            for (int c = 0; c < net_.cols; ++c) {
                for (int d = 0; d < 4; ++d) {
                    int sr, sc;
                    neighbor(r, c, static_cast<Dir>((d + 2) % 4), sr, sc);
                    detail::LinkInfo link;
                    link.id = static_cast<int>(links_.size());
                    link.dir = static_cast<Dir>(d);
                    link.from_node = inside(sr, sc) ? node_id(sr, sc) : -1;
                    link.to_node = node_id(r, c);
                    links_.push_back(link);
                    incoming_[static_cast<std::size_t>(node_id(r, c))]
                             [static_cast<std::size_t>(d)] = link.id;
                    if (link.from_node >= 0)
                        outgoing_[static_cast<std::size_t>(link.from_node)]
                                 [static_cast<std::size_t>(d)] = link.id;
                }
            }
        }
        for (int r = 0; r < net_.rows; ++r) {
            for (int c = 0; c < net_.cols; ++c) {
                for (int d = 0; d < 4; ++d) {
                    if (outgoing_[static_cast<std::size_t>(node_id(r, c))]
                                 [static_cast<std::size_t>(d)] >= 0)
                        continue;
                    detail::LinkInfo link;
                    link.id = static_cast<int>(links_.size());
                    link.dir = static_cast<Dir>(d);
                    link.from_node = node_id(r, c);
                    link.to_node = -1;
                    links_.push_back(link);
                    outgoing_[static_cast<std::size_t>(node_id(r, c))]
                             [static_cast<std::size_t>(d)] = link.id;
                }
            }
        }

        lanes_.assign(links_.size(),
                      std::vector<std::vector<int>>(
                          static_cast<std::size_t>(net_.lanes_per_approach)));
        for (const auto& l : links_)
            if (l.from_node < 0) entry_links_.push_back(l.id);
    }

    int lane_for_movement(Move m) const {
        int L = net_.lanes_per_approach;
        switch (m) {
            case Move::Left: return 0;
            case Move::Right: return L - 1;
            case Move::Through: return (L - 1) / 2;
        }
        return 0;
    }

    // lane to use on route[pos], decided by the movement at that link's end
    int lane_for_route_pos(const std::vector<int>& route, int pos) const {
        if (pos + 1 >= static_cast<int>(route.size()))
            return lane_for_movement(Move::Through);
        Dir cur = links_[static_cast<std::size_t>(route[static_cast<std::size_t>(pos)])].dir;
        Dir nxt =
            links_[static_cast<std::size_t>(route[static_cast<std::size_t>(pos + 1)])].dir;
        return lane_for_movement(movement_between(cur, nxt));
    }

    void generate_schedule(std::uint64_t seed) {
        Rng rng(seed);
        const int max_route_links = 10 * (net_.rows + net_.cols) + 50;
        for (long long t = 0; t < net_.episode_len; ++t) {
            for (int link_id : entry_links_) {
                for (int slot = 0; slot < net_.lanes_per_approach; ++slot) {
                    if (!rng.bernoulli(net_.spawn_rate * net_.sim_dt)) continue;
                    detail::SpawnEvent ev;
                    ev.step = t;
                    ev.entry_link = link_id;
                    ev.route.push_back(link_id);
                    int cur = link_id;
                    while (links_[static_cast<std::size_t>(cur)].to_node >= 0) {
                        int node = links_[static_cast<std::size_t>(cur)].to_node;
                        Dir dir = links_[static_cast<std::size_t>(cur)].dir;
                        double u = rng.uniform();
                        Move m = Move::Through;
                        if (static_cast<int>(ev.route.size()) < max_route_links) {
                            if (u < net_.turn_prob / 2.0)
                                m = Move::Left;
                            else if (u < net_.turn_prob)
                                m = Move::Right;
                        }
                        Dir nd = turn_direction(dir, m);
                        cur = outgoing_[static_cast<std::size_t>(node)]
                                       [static_cast<std::size_t>(static_cast<int>(nd))];
                        ev.route.push_back(cur);
                    }
                    schedule_.push_back(std::move(ev));
                }
            }
        }
    }

    double nominal_speed(const Vehicle& v, double v_safe) const {
        double dt = net_.sim_dt;
        double desired = std::min({max_speed_, v.speed + accel_ * dt, v_safe});
        // comfort floor: braking stays within maxNegAcc unless a hard cap
        // (red line, bumper barrier) forces more during execution
        return std::clamp(std::max(desired, v.speed - max_neg_acc_ * dt), 0.0, max_speed_);
    }

    // moving leaders keep the Krauss headway; an effectively stopped leader is
    // a standing target approached with the exact discrete stopping rule
    double follow_speed(double free_gap, double leader_speed) const {
        if (leader_speed <= kStoppedSpeed)
            return detail::max_stop_speed(free_gap - min_gap_, brake_, net_.sim_dt);
        return detail::safe_speed(free_gap - min_gap_, leader_speed, headway_time_, brake_);
    }

    double plan_follower(const Vehicle& v, const Vehicle& leader) const {
        double free_gap = (leader.position - veh_length_) - v.position;
        return nominal_speed(v, follow_speed(free_gap, leader.speed));
    }

    double plan_head(const Vehicle& v) {
        double dt = net_.sim_dt;
        double to_line = net_.link_length - v.position;
        const auto& link = links_[static_cast<std::size_t>(v.link)];

        if (link.to_node < 0) return nominal_speed(v, max_speed_);  // free outflow

        Dir dir = link.dir;
        Move move = Move::Through;
        if (v.route_pos + 1 < static_cast<int>(v.route.size())) {
            Dir nxt = links_[static_cast<std::size_t>(
                                 v.route[static_cast<std::size_t>(v.route_pos + 1)])]
                          .dir;
            move = movement_between(dir, nxt);
        }
        bool green =
            movement_allowed(phases_[static_cast<std::size_t>(link.to_node)], dir, move);

        if (!green) {
            double vs = detail::max_stop_speed(to_line, brake_, dt);
            // hard cap: never past the line on red
            return std::max(std::min(nominal_speed(v, vs), to_line / dt), 0.0);
        }

        int target = v.route[static_cast<std::size_t>(v.route_pos + 1)];
        int target_lane = lane_for_route_pos(v.route, v.route_pos + 1);
        const auto& order = lanes_[static_cast<std::size_t>(target)]
                                  [static_cast<std::size_t>(target_lane)];
        double vs = max_speed_;
        if (!order.empty()) {
            const Vehicle& tail = vehicles_[static_cast<std::size_t>(order.back())];
            double free_gap = to_line + (tail.position - veh_length_);
            vs = follow_speed(free_gap, tail.speed);
        }
        double v_plan = nominal_speed(v, vs);
        if (v.position + v_plan * dt > net_.link_length) {
            planned_cross_.push_back(
                {v.id, target, target_lane, v.position + v_plan * dt - net_.link_length});
        }
        return v_plan;
    }

    void plan_speeds() {
        planned_speed_.assign(vehicles_.size(), 0.0);
        planned_cross_.clear();
        for (std::size_t link = 0; link < links_.size(); ++link) {
            for (std::size_t lane = 0; lane < lanes_[link].size(); ++lane) {
                const auto& order = lanes_[link][lane];
                for (std::size_t i = 0; i < order.size(); ++i) {
                    const Vehicle& v = vehicles_[static_cast<std::size_t>(order[i])];
                    planned_speed_[static_cast<std::size_t>(v.id)] =
                        (i == 0) ? plan_head(v)
                                 : plan_follower(
                                       v, vehicles_[static_cast<std::size_t>(order[i - 1])]);
                }
            }
        }
    }

    bool is_planned_cross(int vehicle_id) const {
        for (const auto& pm : planned_cross_)
            if (pm.vehicle == vehicle_id) return true;
        return false;
    }

    void execute_moves() {
        double dt = net_.sim_dt;
        moved_speed_.assign(vehicles_.size(), 0.0);
        std::vector<int> completed_now;

        // pass 1: in-lane motion front-to-back. A departing head (crossing or
        // completing) leaves a one-step shadow barrier at its old rear, so
        // followers can never overlap it even if it ends up held at the line.
        for (std::size_t link = 0; link < links_.size(); ++link) {
            bool exit_link = links_[link].to_node < 0;
            for (std::size_t lane = 0; lane < lanes_[link].size(); ++lane) {
                auto& order = lanes_[link][lane];
                std::vector<int> kept;
                kept.reserve(order.size());
                double barrier = std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < order.size(); ++i) {
                    int id = order[i];
                    Vehicle& v = vehicles_[static_cast<std::size_t>(id)];
                    double target =
                        v.position + planned_speed_[static_cast<std::size_t>(id)] * dt;

                    if (i == 0 && exit_link && target > net_.link_length) {
                        moved_speed_[static_cast<std::size_t>(id)] =
                            planned_speed_[static_cast<std::size_t>(id)];
                        completed_now.push_back(id);
                        barrier = v.position - veh_length_;
                        continue;
                    }
                    if (i == 0 && !exit_link && is_planned_cross(id)) {
                        barrier = v.position - veh_length_;
                        continue;
                    }

                    double x_new =
                        std::max(v.position, std::min({target, barrier, net_.link_length}));
                    moved_speed_[static_cast<std::size_t>(id)] = (x_new - v.position) / dt;
                    v.position = x_new;
                    barrier = v.position - veh_length_;
                    kept.push_back(id);
                }
                order = std::move(kept);
            }
        }

        // pass 2: junction crossings, furthest-reaching first per target lane
        std::stable_sort(planned_cross_.begin(), planned_cross_.end(),
                         [](const PlannedMove& a, const PlannedMove& b) {
                             if (a.target_link != b.target_link)
                                 return a.target_link < b.target_link;
                             if (a.target_lane != b.target_lane)
                                 return a.target_lane < b.target_lane;
                             if (a.desired_pos != b.desired_pos)
                                 return a.desired_pos > b.desired_pos;
                             return a.vehicle < b.vehicle;
                         });
        for (const auto& pm : planned_cross_) {
            Vehicle& v = vehicles_[static_cast<std::size_t>(pm.vehicle)];
            auto& target_order = lanes_[static_cast<std::size_t>(pm.target_link)]
                                       [static_cast<std::size_t>(pm.target_lane)];
            double barrier = std::numeric_limits<double>::infinity();
            if (!target_order.empty())
                barrier = vehicles_[static_cast<std::size_t>(target_order.back())].position -
                          veh_length_;
            double x_new = std::min(pm.desired_pos, barrier);
            if (x_new <= 0.0) {
                // target full: hold at the stop line and re-join the old lane
                moved_speed_[static_cast<std::size_t>(pm.vehicle)] =
                    (net_.link_length - v.position) / dt;
                v.position = net_.link_length;
                auto& old_order = lanes_[static_cast<std::size_t>(v.link)]
                                        [static_cast<std::size_t>(v.lane)];
                old_order.insert(old_order.begin(), pm.vehicle);
                continue;
            }
            moved_speed_[static_cast<std::size_t>(pm.vehicle)] =
                ((net_.link_length - v.position) + x_new) / dt;
            v.link = pm.target_link;
            v.lane = pm.target_lane;
            v.position = x_new;
            v.route_pos += 1;
            target_order.push_back(pm.vehicle);
        }

        // accounting over vehicles active at step start
        for (int id : active_) {
            Vehicle& v = vehicles_[static_cast<std::size_t>(id)];
            double speed = moved_speed_[static_cast<std::size_t>(id)];
            v.speed = speed;
            if (speed > kStoppedSpeed) {
                moving_time_ += dt;
            } else {
                waiting_time_ += dt;
                v.wait_time += dt;
            }
        }

        for (int id : completed_now) {
            Vehicle& v = vehicles_[static_cast<std::size_t>(id)];
            completed_.push_back(
                {id, v.spawn_step, timestep_ + 1, v.wait_time, v.ideal_travel_time});
            active_.erase(std::remove(active_.begin(), active_.end(), id), active_.end());
        }
    }

    void process_spawns() {
        while (schedule_pos_ < schedule_.size() &&
               schedule_[schedule_pos_].step <= timestep_) {
            pending_.push_back(static_cast<int>(schedule_pos_));
            schedule_pos_ += 1;
        }
        std::size_t write = 0;
        for (std::size_t i = 0; i < pending_.size(); ++i) {
            const auto& ev = schedule_[static_cast<std::size_t>(pending_[i])];
            int lane = lane_for_route_pos(ev.route, 0);
            auto& order = lanes_[static_cast<std::size_t>(ev.entry_link)]
                                [static_cast<std::size_t>(lane)];
            double tail_rear = std::numeric_limits<double>::infinity();
            if (!order.empty())
                tail_rear =
                    vehicles_[static_cast<std::size_t>(order.back())].position - veh_length_;
            if (tail_rear < veh_length_ + min_gap_) {
                pending_[write++] = pending_[i];  // no room yet, stays queued
                continue;
            }
            Vehicle v;
            v.id = static_cast<int>(vehicles_.size());
            v.link = ev.entry_link;
            v.lane = lane;
            v.position = veh_length_;  // rear bumper at the lane start
            v.speed = 0.0;
            v.route = ev.route;
            v.route_pos = 0;
            v.spawn_step = timestep_;
            v.route_length = static_cast<double>(ev.route.size()) * net_.link_length;
            v.ideal_travel_time = v.route_length / max_speed_;
            order.push_back(v.id);
            active_.push_back(v.id);
            vehicles_.push_back(std::move(v));
            spawned_ += 1;
        }
        pending_.resize(write);
    }

    NetworkSpec net_;
    double veh_length_ = 0, max_pos_acc_ = 0, max_neg_acc_ = 0, usual_pos_acc_ = 0,
           usual_neg_acc_ = 0, min_gap_ = 0, max_speed_ = 0, headway_time_ = 0;
    double accel_ = 0, brake_ = 0;

    std::vector<detail::LinkInfo> links_;
    std::vector<std::array<int, 4>> incoming_;  // [node][travel dir]
    std::vector<std::array<int, 4>> outgoing_;
    std::vector<int> entry_links_;
    std::vector<std::vector<std::vector<int>>> lanes_;  // [link][lane] ids, front first

    std::vector<Vehicle> vehicles_;
    std::vector<int> active_;
    std::vector<CompletedVehicle> completed_;
    std::vector<detail::SpawnEvent> schedule_;
    std::size_t schedule_pos_ = 0;
    std::vector<int> pending_;

    std::vector<int> phases_;
    std::vector<double> planned_speed_;
    std::vector<double> moved_speed_;
    std::vector<PlannedMove> planned_cross_;

    int timestep_ = 0;
    long long spawned_ = 0;
    double moving_time_ = 0.0;
    double waiting_time_ = 0.0;
    double episode_return_ = 0.0;
};

}  // namespace mcl
