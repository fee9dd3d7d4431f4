#pragma once

// Discrete grid mazes: '#' walls, '.' free cells. Free cells become states in
// row-major order; five deterministic actions (stay, up, down, left, right).

#include <array>
#include <deque>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"
#include "switchsim/mdp.hpp"

namespace switchsim::maze {

enum Action : int { kStay = 0, kUp = 1, kDown = 2, kLeft = 3, kRight = 4 };
inline constexpr int kNumActions = 5;
inline constexpr std::array<std::pair<int, int>, kNumActions> kMoves{{{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct MazeSpec {
  std::vector<std::string> grid;
  double discount = 0.98;
};

/// Bidirectional map between grid cells and state indices.
class CellMap {
 public:
  CellMap() = default;
  explicit CellMap(const std::vector<std::string>& grid) {
    rows_ = static_cast<int>(grid.size());
    cols_ = rows_ > 0 ? static_cast<int>(grid[0].size()) : 0;
    state_of_.assign(static_cast<std::size_t>(rows_) * cols_, -1);
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c)
        if (grid[r][c] == '.') {
          state_of_[r * cols_ + c] = static_cast<int>(cells_.size());
          cells_.push_back({r, c});
        }
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int n_states() const { return static_cast<int>(cells_.size()); }
  bool in_bounds(Cell c) const { return c.row >= 0 && c.row < rows_ && c.col >= 0 && c.col < cols_; }
  bool is_free(Cell c) const { return in_bounds(c) && state_of_[c.row * cols_ + c.col] >= 0; }

  /// State index of a free cell; throws ConfigError for walls or out-of-range cells.
  int state(Cell c) const {
    if (!is_free(c))
      throw ConfigError("cell (" + std::to_string(c.row) + "," + std::to_string(c.col) + ") is not a free cell");
    return state_of_[c.row * cols_ + c.col];
  }
  Cell cell(int s) const { return cells_.at(s); }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<int> state_of_;
  std::vector<Cell> cells_;
};

struct MazeMdp {
  Mdp mdp;
  CellMap map;
};

struct RewardRegion {
  std::vector<Cell> cells;
  double value = 0.0;
};

struct RewardRegionSpec {
  std::vector<RewardRegion> regions;
};

struct Task {
  std::string name;
  RewardRegionSpec reward;
  std::vector<Cell> start_cells;
  std::optional<Cell> goal_cell;
  int episode_length = 100;
};

struct MazeConfig {
  MazeSpec spec;
  std::vector<Task> tasks;
};

inline void validate_spec(const MazeSpec& spec) {
  if (spec.grid.empty() || spec.grid[0].empty()) throw ConfigError("maze grid is empty");
  const std::size_t width = spec.grid[0].size();
  bool any_free = false;
  for (const auto& row : spec.grid) {
    if (row.size() != width) throw ConfigError("maze grid is not rectangular");
    for (char ch : row) {
      if (ch != '#' && ch != '.') throw ConfigError(std::string("unknown maze cell code '") + ch + "'");
      any_free = any_free || ch == '.';
    }
  }
  if (!any_free) throw ConfigError("maze has no free cell");
  if (!(spec.discount > 0.0 && spec.discount < 1.0)) throw ConfigError("maze discount must lie in (0,1)");
}

/// Deterministic grid MDP. Moving into a wall or off the grid leaves the state unchanged.
inline MazeMdp build_mdp(const MazeSpec& spec) {
  validate_spec(spec);
  MazeMdp out;
  out.map = CellMap(spec.grid);
  const int n = out.map.n_states();
  out.mdp = Mdp::zeros(n, kNumActions, spec.discount);
  for (int s = 0; s < n; ++s) {
    const Cell c = out.map.cell(s);
    for (int a = 0; a < kNumActions; ++a) {
      const Cell next{c.row + kMoves[a].first, c.col + kMoves[a].second};
      const int t = out.map.is_free(next) ? out.map.state(next) : s;
      out.mdp.transitions[a](s, t) = 1.0;
    }
  }
  return out;
}

/// Deterministic successor of (s, a) in a maze MDP.
inline int step(const MazeMdp& env, int s, int a) {
  const Cell c = env.map.cell(s);
  const Cell next{c.row + kMoves[a].first, c.col + kMoves[a].second};
  return env.map.is_free(next) ? env.map.state(next) : s;
}

/// Later regions overwrite earlier ones on shared cells.
inline RewardVector reward_vector(const RewardRegionSpec& spec, const CellMap& map) {
  RewardVector r{Vector::Zero(map.n_states())};
  for (const auto& region : spec.regions)
    for (const auto& c : region.cells) r.values[map.state(c)] = region.value;
  return r;
}

inline Task goal_task(const MazeSpec& spec, Cell goal, std::vector<Cell> start_cells = {}, int episode_length = 100) {
  const CellMap map(spec.grid);
  if (!map.is_free(goal)) throw ConfigError("goal cell is a wall");
  for (const auto& c : start_cells)
    if (!map.is_free(c)) throw ConfigError("start cell is a wall");
  Task t;
  t.name = "goal_" + std::to_string(goal.row) + "_" + std::to_string(goal.col);
  t.reward.regions.push_back({{goal}, 1.0});
  t.start_cells = std::move(start_cells);
  t.goal_cell = goal;
  t.episode_length = episode_length;
  return t;
}

/// BFS step counts from `from` to every state; -1 when unreachable.
inline std::vector<int> shortest_path_lengths(const MazeMdp& env, int from) {
  std::vector<int> dist(env.map.n_states(), -1);
  std::deque<int> queue{from};
  dist[from] = 0;
  while (!queue.empty()) {
    const int s = queue.front();
    queue.pop_front();
    for (int a = 1; a < kNumActions; ++a) {
      const int t = step(env, s, a);
      if (dist[t] < 0) {
        dist[t] = dist[s] + 1;
        queue.push_back(t);
      }
    }
  }
  return dist;
}

// ---------------------------------------------------------------------------
// JSON config:
// {"grid": [...], "discount": 0.98,
//  "tasks": [{"name", "rewards": [{"cells": [[r,c]...], "value"}], "start": [[r,c]...],
//             "goal": [r,c] (optional), "episode_length"}]}

inline Cell cell_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("cell must be a [row, col] pair");
  return {j[0].get<int>(), j[1].get<int>()};
}

inline nlohmann::json cell_to_json(Cell c) { return nlohmann::json::array({c.row, c.col}); }

inline MazeConfig maze_config_from_json(const nlohmann::json& j) {
  MazeConfig cfg;
  try {
    cfg.spec.grid = j.at("grid").get<std::vector<std::string>>();
    cfg.spec.discount = j.value("discount", 0.98);
    validate_spec(cfg.spec);
    const CellMap map(cfg.spec.grid);
    for (const auto& jt : j.value("tasks", nlohmann::json::array())) {
      Task t;
      t.name = jt.at("name").get<std::string>();
      for (const auto& jr : jt.value("rewards", nlohmann::json::array())) {
        RewardRegion region;
        region.value = jr.at("value").get<double>();
        for (const auto& jc : jr.at("cells")) region.cells.push_back(cell_from_json(jc));
        t.reward.regions.push_back(std::move(region));
      }
      for (const auto& jc : jt.value("start", nlohmann::json::array())) t.start_cells.push_back(cell_from_json(jc));
      if (jt.contains("goal") && !jt.at("goal").is_null()) t.goal_cell = cell_from_json(jt.at("goal"));
      t.episode_length = jt.value("episode_length", 100);
      if (t.episode_length < 1) throw ConfigError("task " + t.name + ": episode_length must be >= 1");
      for (const auto& c : t.start_cells)
        if (!map.is_free(c)) throw ConfigError("task " + t.name + ": start cell is a wall");
      if (t.goal_cell && !map.is_free(*t.goal_cell)) throw ConfigError("task " + t.name + ": goal cell is a wall");
      reward_vector(t.reward, map);  // validates reward cells
      cfg.tasks.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed maze config: ") + e.what());
  }
  return cfg;
}

inline nlohmann::json maze_config_to_json(const MazeConfig& cfg) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : cfg.tasks) {
    nlohmann::json rewards = nlohmann::json::array();
    for (const auto& r : t.reward.regions) {
      nlohmann::json cells = nlohmann::json::array();
      for (const auto& c : r.cells) cells.push_back(cell_to_json(c));
      rewards.push_back({{"cells", cells}, {"value", r.value}});
    }
    nlohmann::json starts = nlohmann::json::array();
    for (const auto& c : t.start_cells) starts.push_back(cell_to_json(c));
    nlohmann::json jt{{"name", t.name}, {"rewards", rewards}, {"start", starts}, {"episode_length", t.episode_length}};
    if (t.goal_cell) jt["goal"] = cell_to_json(*t.goal_cell);
    tasks.push_back(std::move(jt));
  }
  return {{"grid", cfg.spec.grid}, {"discount", cfg.spec.discount}, {"tasks", tasks}};
}

inline MazeConfig load_maze_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open maze config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return maze_config_from_json(j);
}

/// Discrete medium maze: the 6x6 medium layout with every cell doubled to a
/// 2x2 block, plus a one-cell border. 104 free cells.
inline MazeSpec medium_maze_spec(double discount = 0.98) {
  const std::array<const char*, 6> coarse{"..##..", "..#...", "#...##", "..#...", ".#..#.", "...#.."};
  MazeSpec spec;
  spec.discount = discount;
  spec.grid.assign(14, std::string(14, '#'));
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c)
      for (int dr = 0; dr < 2; ++dr)
        for (int dc = 0; dc < 2; ++dc) spec.grid[1 + 2 * r + dr][1 + 2 * c + dc] = coarse[r][c];
  return spec;
}

}  // namespace switchsim::maze
