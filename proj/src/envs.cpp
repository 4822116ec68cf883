#include "crl/envs.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace crl::envs {

using nlohmann::json;

bool MazeLayout::wall(int r, int c) const {
    if (r < 0 || r >= rows() || c < 0 || c >= cols()) return true;
    return grid[r][c] == '#';
}

void MazeLayout::validate() const {
    if (grid.empty()) throw std::invalid_argument("layout: empty grid");
    for (const auto& row : grid)
        if (static_cast<int>(row.size()) != cols())
            throw std::invalid_argument("layout: ragged grid");
    for (int c = 0; c < cols(); ++c)
        if (!wall(0, c) || !wall(rows() - 1, c))
            throw std::invalid_argument("layout: border must be walls");
    for (int r = 0; r < rows(); ++r)
        if (!wall(r, 0) || !wall(r, cols() - 1))
            throw std::invalid_argument("layout: border must be walls");
    if (free_cells().empty()) throw std::invalid_argument("layout: no free cells");
}

Vec2 MazeLayout::cell_center(int r, int c) const {
    return {(c + 0.5 - 0.5 * cols()) * cell_size, (r + 0.5 - 0.5 * rows()) * cell_size};
}

std::pair<int, int> MazeLayout::cell_of(Vec2 p) const {
    const int c = static_cast<int>(std::floor(p.x / cell_size + 0.5 * cols()));
    const int r = static_cast<int>(std::floor(p.y / cell_size + 0.5 * rows()));
    return {r, c};
}

std::vector<std::pair<int, int>> MazeLayout::free_cells() const {
    std::vector<std::pair<int, int>> cells;
    for (int r = 0; r < rows(); ++r)
        for (int c = 0; c < cols(); ++c)
            if (!wall(r, c)) cells.emplace_back(r, c);
    return cells;
}

MazeLayout MazeLayout::standard(const std::string& id) {
    MazeLayout m;
    m.id = id;
    if (id == "U") {
        m.grid = {
            "#####",
            "#...#",
            "###.#",
            "#...#",
            "#####",
        };
    } else if (id == "M") {
        m.grid = {
            "########",
            "#..#...#",
            "#..#.#.#",
            "#....#.#",
            "#.##...#",
            "#..#.#.#",
            "#....#.#",
            "########",
        };
    } else if (id == "L") {
        m.grid = {
            "############",
            "#...#......#",
            "#.#.#.####.#",
            "#.#.#....#.#",
            "#.#.#.##.#.#",
            "#.#....#.#.#",
            "#.####.#.#.#",
            "#......#...#",
            "############",
        };
    } else {
        throw std::invalid_argument("unknown layout id: " + id);
    }
    m.validate();
    return m;
}

TaskTransform transform_from_string(const std::string& s) {
    if (s == "N") return TaskTransform::N;
    if (s == "IA") return TaskTransform::IA;
    if (s == "IO") return TaskTransform::IO;
    if (s == "PA") return TaskTransform::PA;
    if (s == "PO") return TaskTransform::PO;
    throw std::invalid_argument("unknown transform: " + s);
}

std::string to_string(TaskTransform t) {
    switch (t) {
        case TaskTransform::N: return "N";
        case TaskTransform::IA: return "IA";
        case TaskTransform::IO: return "IO";
        case TaskTransform::PA: return "PA";
        case TaskTransform::PO: return "PO";
    }
    return "?";
}

std::vector<double> transform_obs(TaskTransform t, std::span<const double> raw) {
    std::vector<double> out(raw.begin(), raw.end());
    const std::size_t n = out.size();
    switch (t) {
        case TaskTransform::IO:
            for (auto& v : out) v = -v;
            break;
        case TaskTransform::PO:
            for (std::size_t i = 0; i < n; ++i) out[i] = raw[(i + 1) % n];
            break;
        default:
            break;
    }
    return out;
}

std::vector<double> invert_obs(TaskTransform t, std::span<const double> obs) {
    std::vector<double> out(obs.begin(), obs.end());
    const std::size_t n = out.size();
    switch (t) {
        case TaskTransform::IO:
            for (auto& v : out) v = -v;
            break;
        case TaskTransform::PO:
            for (std::size_t i = 0; i < n; ++i) out[(i + 1) % n] = obs[i];
            break;
        default:
            break;
    }
    return out;
}

std::array<double, 2> transform_action(TaskTransform t, std::array<double, 2> a) {
    switch (t) {
        case TaskTransform::IA: return {-a[0], -a[1]};
        case TaskTransform::PA: return {a[1], a[0]};
        default: return a;
    }
}

std::array<double, 2> inverse_action(TaskTransform t, std::array<double, 2> a) {
    // both IA and PA are involutions on 2-vectors
    return transform_action(t, a);
}

std::pair<std::vector<double>, std::array<double, 2>> apply_transform(
    TaskTransform t, std::span<const double> obs, std::array<double, 2> action) {
    return {transform_obs(t, obs), transform_action(t, action)};
}

Env::Env(MazeLayout layout, TaskTransform transform, int horizon, std::uint64_t seed)
    : layout_(std::move(layout)), transform_(transform), horizon_(horizon), rng_(seed) {
    layout_.validate();
    if (horizon_ < 1) throw std::invalid_argument("env: horizon must be >= 1");
    free_cells_ = layout_.free_cells();
}

EnvState Env::reset() {
    const auto start = free_cells_[rng_.uniform_int(free_cells_.size())];
    const auto goal = free_cells_[rng_.uniform_int(free_cells_.size())];
    EnvState s;
    s.pos = layout_.cell_center(start.first, start.second);
    // jitter within the cell; 0.3 + agent radius keeps every corner inside
    s.pos.x += rng_.uniform(-0.3, 0.3) * layout_.cell_size;
    s.pos.y += rng_.uniform(-0.3, 0.3) * layout_.cell_size;
    s.vel = {0.0, 0.0};
    s.goal = layout_.cell_center(goal.first, goal.second);
    s.t = 0;
    return s;
}

bool Env::position_free(Vec2 p) const {
    constexpr double r = kAgentRadius;
    for (double dx : {-r, r})
        for (double dy : {-r, r}) {
            const auto [cr, cc] = layout_.cell_of({p.x + dx, p.y + dy});
            if (layout_.wall(cr, cc)) return false;
        }
    return true;
}

StepResult Env::step(const EnvState& state, std::array<double, 2> agent_action) const {
    for (double a : agent_action)
        if (!std::isfinite(a)) throw std::invalid_argument("step: non-finite action");
    agent_action[0] = std::clamp(agent_action[0], -1.0, 1.0);
    agent_action[1] = std::clamp(agent_action[1], -1.0, 1.0);
    const auto a = transform_action(transform_, agent_action);

    EnvState s = state;
    s.vel.x = std::clamp(0.8 * s.vel.x + 0.2 * a[0] * kVMax, -kVMax, kVMax);
    s.vel.y = std::clamp(0.8 * s.vel.y + 0.2 * a[1] * kVMax, -kVMax, kVMax);

    if (position_free({s.pos.x + s.vel.x, s.pos.y})) {
        s.pos.x += s.vel.x;
    } else {
        s.vel.x = 0.0;
    }
    if (position_free({s.pos.x, s.pos.y + s.vel.y})) {
        s.pos.y += s.vel.y;
    } else {
        s.vel.y = 0.0;
    }
    s.t = state.t + 1;

    StepResult out;
    out.reward = dist(s.pos, s.goal) <= kGoalRadius ? 1.0 : 0.0;
    out.done = out.reward == 1.0 || s.t >= horizon_;
    out.state = s;
    return out;
}

std::vector<double> Env::observe(const EnvState& state) const {
    const double raw[4] = {state.pos.x, state.pos.y, state.vel.x, state.vel.y};
    return transform_obs(transform_, raw);
}

int default_horizon(const std::string& layout_id) {
    if (layout_id == "U") return 300;
    if (layout_id == "M") return 600;
    if (layout_id == "L") return 900;
    return 600;
}

// Way steps scale the reference values (U 50, M/L 25) by the ratio of the
// desk maze span to the MuJoCo-scaled span (4 m per cell), floored at 3.
int default_way_step(const std::string& layout_id) {
    const double mujoco_scale = 4.0;
    double reference = 25.0;
    if (layout_id == "U") reference = 50.0;
    const int k = static_cast<int>(reference / mujoco_scale);
    return std::max(3, k);
}

double default_her_temperature(const std::string& layout_id) {
    if (layout_id == "M") return 75.0;
    return 100.0;
}

std::size_t Dataset::transition_count() const {
    std::size_t n = 0;
    for (const auto& ep : episodes) n += ep.steps.size();
    return n;
}

double Dataset::mean_episode_length() const {
    if (episodes.empty()) return 0.0;
    return static_cast<double>(transition_count()) / static_cast<double>(episodes.size());
}

std::vector<std::pair<int, int>> bfs_path(const MazeLayout& layout, std::pair<int, int> from,
                                          std::pair<int, int> to) {
    const int R = layout.rows(), C = layout.cols();
    std::vector<int> prev(static_cast<std::size_t>(R) * C, -2);
    auto idx = [C](int r, int c) { return r * C + c; };
    std::deque<std::pair<int, int>> queue;
    queue.push_back(from);
    prev[idx(from.first, from.second)] = -1;
    while (!queue.empty()) {
        const auto [r, c] = queue.front();
        queue.pop_front();
        if (std::pair{r, c} == to) break;
        const int dr[4] = {1, -1, 0, 0};
        const int dc[4] = {0, 0, 1, -1};
        for (int d = 0; d < 4; ++d) {
            const int nr = r + dr[d], nc = c + dc[d];
            if (layout.wall(nr, nc) || prev[idx(nr, nc)] != -2) continue;
            prev[idx(nr, nc)] = idx(r, c);
            queue.push_back({nr, nc});
        }
    }
    if (prev[idx(to.first, to.second)] == -2) return {};
    std::vector<std::pair<int, int>> path;
    for (int cur = idx(to.first, to.second); cur != -1; cur = prev[cur])
        path.push_back({cur / C, cur % C});
    std::reverse(path.begin(), path.end());
    return path;
}

namespace {

// Derives the native achieved positions from the stored transformed
// observations, for generation and load alike.
void finalize_achieved(Dataset& ds) {
    const TaskTransform tf = transform_from_string(ds.transform);
    for (auto& ep : ds.episodes) {
        ep.achieved.clear();
        ep.achieved.reserve(ep.steps.size() + 1);
        for (const auto& st : ep.steps) {
            const auto raw = invert_obs(tf, st.obs);
            ep.achieved.push_back({raw[0], raw[1]});
        }
        if (!ep.steps.empty()) {
            const auto raw = invert_obs(tf, ep.steps.back().next_obs);
            ep.achieved.push_back({raw[0], raw[1]});
        }
    }
}

}  // namespace

// Pure-pursuit target: the point a fixed arc length ahead of the agent
// along the polyline (pos, next path cell centers..., goal), replanned
// from the current cell every step. Replanning makes the target a
// function of the observable state alone (single-valued imitation
// targets), and walking the polyline keeps it continuous across cell
// crossings.
Vec2 expert_waypoint(const MazeLayout& layout, Vec2 pos, Vec2 goal) {
    const auto from = layout.cell_of(pos);
    const auto to = layout.cell_of(goal);
    const auto cells = bfs_path(layout, from, to);
    if (cells.empty()) throw std::runtime_error("expert: goal unreachable from start");

    std::vector<Vec2> line;
    line.push_back(pos);
    for (std::size_t i = 1; i < cells.size(); ++i)
        line.push_back(layout.cell_center(cells[i].first, cells[i].second));
    line.push_back(goal);

    double remaining = kExpertLookahead * layout.cell_size;
    for (std::size_t i = 0; i + 1 < line.size(); ++i) {
        const double seg = dist(line[i], line[i + 1]);
        if (seg >= remaining && seg > 0.0) {
            const double f = remaining / seg;
            return {line[i].x + f * (line[i + 1].x - line[i].x),
                    line[i].y + f * (line[i + 1].y - line[i].y)};
        }
        remaining -= seg;
    }
    return goal;
}

Episode expert_episode(const Env& env, const EnvState& start, Rng& rng, double noise_std) {
    const auto& layout = env.layout();
    expert_waypoint(layout, start.pos, start.goal);  // reachability check up front

    Episode ep;
    ep.goal = start.goal;
    EnvState s = start;
    bool done = false;
    while (!done) {
        const Vec2 target = expert_waypoint(layout, s.pos, s.goal);
        const std::array<double, 2> a_dyn = {
            std::clamp(kExpertGain * (target.x - s.pos.x) - kExpertDamping * s.vel.x / Env::kVMax +
                           noise_std * rng.normal(),
                       -1.0, 1.0),
            std::clamp(kExpertGain * (target.y - s.pos.y) - kExpertDamping * s.vel.y / Env::kVMax +
                           noise_std * rng.normal(),
                       -1.0, 1.0),
        };
        const auto a_agent = inverse_action(env.transform(), a_dyn);
        const auto res = env.step(s, a_agent);
        ep.steps.push_back({env.observe(s), a_agent, res.reward, env.observe(res.state)});
        s = res.state;
        done = res.done;
    }
    return ep;
}

Dataset gen_dataset(const MazeLayout& layout, TaskTransform transform, int horizon,
                    int n_episodes, std::uint64_t seed, double noise_std) {
    if (n_episodes < 1) throw std::invalid_argument("gen_dataset: n_episodes must be >= 1");
    Dataset ds;
    ds.layout = layout.id;
    ds.transform = to_string(transform);
    ds.seed = seed;
    ds.noise_std = noise_std;

    std::uint64_t attempt = 0;
    const std::uint64_t max_attempts = 100ULL * static_cast<std::uint64_t>(n_episodes);
    while (static_cast<int>(ds.episodes.size()) < n_episodes) {
        if (attempt >= max_attempts)
            throw std::runtime_error("gen_dataset: too many failed expert attempts");
        Env env(layout, transform, horizon, Rng::derive(seed, 2 * attempt));
        Rng noise(Rng::derive(seed, 2 * attempt + 1));
        ++attempt;
        const auto start = env.reset();
        Episode ep = expert_episode(env, start, noise, noise_std);
        if (!ep.steps.empty() && ep.steps.back().reward == 1.0)
            ds.episodes.push_back(std::move(ep));
    }
    finalize_achieved(ds);
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    json header = {{"format_version", ds.format_version},
                   {"layout", ds.layout},
                   {"transform", ds.transform},
                   {"seed", ds.seed},
                   {"n_episodes", ds.episodes.size()},
                   {"noise_std", ds.noise_std}};
    out << header.dump() << "\n";
    for (const auto& ep : ds.episodes) {
        json j;
        j["goal"] = {ep.goal.x, ep.goal.y};
        json steps = json::array();
        for (const auto& st : ep.steps) {
            steps.push_back({{"o", st.obs},
                             {"a", st.action},
                             {"r", static_cast<int>(st.reward)},
                             {"no", st.next_obs}});
        }
        j["steps"] = std::move(steps);
        out << j.dump() << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& what) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
    };

    Dataset ds;
    std::size_t declared = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail(std::string("malformed json: ") + e.what());
        }
        if (line_no == 1) {
            if (!j.contains("format_version")) fail("missing header");
            ds.format_version = j.at("format_version").get<int>();
            ds.layout = j.at("layout").get<std::string>();
            ds.transform = j.at("transform").get<std::string>();
            ds.seed = j.at("seed").get<std::uint64_t>();
            declared = j.at("n_episodes").get<std::size_t>();
            ds.noise_std = j.value("noise_std", kExpertNoiseStd);
            continue;
        }
        Episode ep;
        try {
            const auto& g = j.at("goal");
            ep.goal = {g.at(0).get<double>(), g.at(1).get<double>()};
            for (const auto& st : j.at("steps")) {
                Transition tr;
                tr.obs = st.at("o").get<std::vector<double>>();
                const auto& a = st.at("a");
                tr.action = {a.at(0).get<double>(), a.at(1).get<double>()};
                tr.reward = st.at("r").get<double>();
                tr.next_obs = st.at("no").get<std::vector<double>>();
                ep.steps.push_back(std::move(tr));
            }
        } catch (const json::exception& e) {
            fail(std::string("bad episode: ") + e.what());
        }
        ds.episodes.push_back(std::move(ep));
    }
    if (declared != ds.episodes.size())
        throw std::runtime_error(path + ": header declares " + std::to_string(declared) +
                                 " episodes, found " + std::to_string(ds.episodes.size()));
    finalize_achieved(ds);
    return ds;
}

}  // namespace crl::envs
