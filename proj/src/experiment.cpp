#include "capslu/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "capslu/rng.hpp"

namespace capslu {

namespace {

double kl_term(double a, double m) { return a > 0.0 ? a * std::log2(a / m) : 0.0; }

void check_distribution(std::span<const double> p, const char* name) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string("jsd: ") + name + " has a negative or NaN entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument(std::string("jsd: ") + name + " does not sum to 1");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("jsd: distributions differ in length");
  check_distribution(p, "p");
  check_distribution(q, "q");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    d += 0.5 * kl_term(p[i], m) + 0.5 * kl_term(q[i], m);
  }
  return std::clamp(d, 0.0, 1.0);
}

std::vector<double> label_distribution(std::span<const std::vector<std::size_t>> label_sets,
                                       std::span<const std::size_t> members, std::size_t n_labels) {
  std::vector<double> dist(n_labels, 0.0);
  double total = 0.0;
  for (std::size_t u : members) {
    for (std::size_t j : label_sets[u]) {
      dist[j] += 1.0;
      total += 1.0;
    }
  }
  for (double& v : dist) v = total > 0.0 ? v / total : 1.0 / static_cast<double>(n_labels);
  return dist;
}

std::string to_string(SplitObjective o) { return o == SplitObjective::mean ? "mean" : "max"; }

SplitObjective parse_split_objective(const std::string& s) {
  if (s == "mean") return SplitObjective::mean;
  if (s == "max") return SplitObjective::max;
  throw std::invalid_argument("unknown split objective '" + s + "' (expected mean or max)");
}

std::vector<std::vector<std::size_t>> BlockSplit::members() const {
  std::vector<std::vector<std::size_t>> out(n_blocks);
  for (std::size_t u = 0; u < block_of.size(); ++u) out[block_of[u]].push_back(u);
  return out;
}

namespace {

/// Label counts per block; the objective is recomputed from these after each trial swap.
class SplitState {
 public:
  SplitState(std::span<const std::vector<std::size_t>> label_sets, std::span<const std::size_t> block_of,
             std::size_t n_blocks, std::size_t n_labels, SplitObjective objective)
      : labels_(label_sets), n_labels_(n_labels), objective_(objective),
        counts_(n_blocks, std::vector<double>(n_labels, 0.0)), totals_(n_blocks, 0.0) {
    for (std::size_t u = 0; u < block_of.size(); ++u) move(u, block_of[u], +1.0);
  }

  void move(std::size_t u, std::size_t block, double sign) {
    for (std::size_t j : labels_[u]) {
      counts_[block][j] += sign;
      totals_[block] += sign;
    }
  }

  double objective() const {
    const std::size_t nb = counts_.size();
    std::vector<std::vector<double>> dist(nb, std::vector<double>(n_labels_));
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t j = 0; j < n_labels_; ++j) {
        dist[b][j] = totals_[b] > 0.0 ? counts_[b][j] / totals_[b] : 1.0 / static_cast<double>(n_labels_);
      }
    }
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < nb; ++a) {
      for (std::size_t b = a + 1; b < nb; ++b) {
        const double d = jsd(dist[a], dist[b]);
        acc = objective_ == SplitObjective::mean ? acc + d : std::max(acc, d);
        ++pairs;
      }
    }
    return objective_ == SplitObjective::mean && pairs > 0 ? acc / static_cast<double>(pairs) : acc;
  }

 private:
  std::span<const std::vector<std::size_t>> labels_;
  std::size_t n_labels_;
  SplitObjective objective_;
  std::vector<std::vector<double>> counts_;
  std::vector<double> totals_;
};

}  // namespace

double split_objective(std::span<const std::vector<std::size_t>> label_sets, std::span<const std::size_t> block_of,
                       std::size_t n_blocks, std::size_t n_labels, SplitObjective objective) {
  return SplitState(label_sets, block_of, n_blocks, n_labels, objective).objective();
}

BlockSplit split_blocks(std::span<const std::vector<std::size_t>> label_sets, std::size_t n_labels,
                        std::size_t n_blocks, std::uint64_t seed, SplitObjective objective) {
  const std::size_t n = label_sets.size();
  if (n == 0) throw std::invalid_argument("split_blocks: empty dataset");
  if (n_blocks < 2) throw std::invalid_argument("split_blocks: need at least 2 blocks");
  if (n_blocks > n) {
    throw std::invalid_argument("split_blocks: " + std::to_string(n_blocks) + " blocks for " + std::to_string(n) +
                                " utterances");
  }
  for (const auto& ls : label_sets) {
    for (std::size_t j : ls) {
      if (j >= n_labels) throw std::invalid_argument("split_blocks: label index out of range");
    }
  }

  BlockSplit split;
  split.n_blocks = n_blocks;
  split.block_of.assign(n, 0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t i = 0; i < n; ++i) split.block_of[order[i]] = i % n_blocks;

  SplitState state(label_sets, split.block_of, n_blocks, n_labels, objective);
  double current = state.objective();
  split.initial_objective = current;
  const std::size_t cap = 10 * n;
  bool improved = true;
  while (improved && split.accepted_swaps < cap) {
    improved = false;
    ++split.passes;
    for (std::size_t i = 0; i < n && split.accepted_swaps < cap; ++i) {
      for (std::size_t j = i + 1; j < n && split.accepted_swaps < cap; ++j) {
        const std::size_t bi = split.block_of[i], bj = split.block_of[j];
        if (bi == bj || label_sets[i] == label_sets[j]) continue;
        state.move(i, bi, -1.0);
        state.move(j, bj, -1.0);
        state.move(i, bj, +1.0);
        state.move(j, bi, +1.0);
        const double trial = state.objective();
        if (trial < current) {
          current = trial;
          split.block_of[i] = bj;
          split.block_of[j] = bi;
          ++split.accepted_swaps;
          improved = true;
        } else {
          state.move(i, bj, -1.0);
          state.move(j, bi, -1.0);
          state.move(i, bi, +1.0);
          state.move(j, bj, +1.0);
        }
      }
    }
  }
  split.objective = current;
  return split;
}

BlockSplit split_blocks(const DatasetManifest& manifest, std::size_t n_blocks, std::uint64_t seed,
                        SplitObjective objective) {
  std::vector<std::vector<std::size_t>> label_sets;
  label_sets.reserve(manifest.utterances.size());
  for (const Utterance& u : manifest.utterances) label_sets.push_back(manifest.label_indices(u));
  return split_blocks(label_sets, manifest.slots.n_labels(), n_blocks, seed, objective);
}

std::string blocks_csv(const DatasetManifest& manifest, const BlockSplit& split) {
  if (split.block_of.size() != manifest.utterances.size()) {
    throw std::invalid_argument("block split does not match manifest");
  }
  std::ostringstream os;
  os << "id,block\n";
  for (std::size_t u = 0; u < split.block_of.size(); ++u) {
    os << manifest.utterances[u].id << ',' << split.block_of[u] << '\n';
  }
  return os.str();
}

void write_blocks(const std::filesystem::path& path, const DatasetManifest& manifest, const BlockSplit& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << blocks_csv(manifest, split);
}

std::vector<std::size_t> read_blocks(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open block file " + path.string());
  std::unordered_map<std::string, std::size_t> block;
  std::string line;
  std::getline(in, line);
  if (line.rfind("id,block", 0) != 0) throw std::runtime_error(path.string() + ": expected header id,block");
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw std::runtime_error(path.string() + ": malformed line '" + line + "'");
    try {
      block[line.substr(0, comma)] = std::stoul(line.substr(comma + 1));
    } catch (const std::logic_error&) {
      throw std::runtime_error(path.string() + ": malformed block index in '" + line + "'");
    }
  }
  std::vector<std::size_t> out;
  out.reserve(manifest.utterances.size());
  for (const Utterance& u : manifest.utterances) {
    auto it = block.find(u.id);
    if (it == block.end()) throw std::runtime_error("utterance " + u.id + " has no block in " + path.string());
    out.push_back(it->second);
  }
  return out;
}

CurvePlan make_curve_plan(std::size_t n_blocks, std::size_t repeats, std::uint64_t seed,
                          std::span<const std::size_t> ks) {
  if (n_blocks < 2) throw std::invalid_argument("curve plan needs at least 2 blocks");
  if (repeats < 1) throw std::invalid_argument("curve plan needs at least 1 repeat");
  std::vector<std::size_t> sizes(ks.begin(), ks.end());
  if (sizes.empty()) {
    for (std::size_t k = 1; k < n_blocks; ++k) sizes.push_back(k);
  }
  Rng rng(seed);
  CurvePlan plan;
  for (std::size_t k : sizes) {
    if (k < 1 || k >= n_blocks) throw std::invalid_argument("training block count out of range");
    // Number of distinct k-subsets, saturated.
    double n_subsets = 1.0;
    for (std::size_t i = 0; i < k; ++i) n_subsets = n_subsets * static_cast<double>(n_blocks - i) / static_cast<double>(i + 1);
    std::set<std::vector<std::size_t>> used;
    for (std::size_t r = 1; r <= repeats; ++r) {
      if (static_cast<double>(used.size()) >= n_subsets - 0.5) used.clear();
      std::vector<std::size_t> train;
      do {
        std::vector<std::size_t> all(n_blocks);
        std::iota(all.begin(), all.end(), 0);
        rng.shuffle(std::span<std::size_t>(all));
        train.assign(all.begin(), all.begin() + static_cast<long>(k));
        std::sort(train.begin(), train.end());
      } while (used.contains(train));
      used.insert(train);
      PlanEntry e;
      e.n_train_blocks = k;
      e.repeat = r;
      e.train_blocks = train;
      for (std::size_t b = 0; b < n_blocks; ++b) {
        if (!std::binary_search(train.begin(), train.end(), b)) e.test_blocks.push_back(b);
      }
      e.seed = derive_seed(seed, plan.size());
      plan.push_back(std::move(e));
    }
  }
  return plan;
}

CurveRunner model_runner(ModelKind kind, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                         const SlotSpec& slots) {
  return [=](std::span<const Example> train_set, std::span<const Example> test_set, std::uint64_t seed) {
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    TrainResult r = train(kind, model_cfg, train_set, tc);
    return evaluate(r.checkpoint, test_set, slots);
  };
}

std::vector<CurvePoint> run_curve(std::span<const Example> examples, std::span<const std::size_t> block_of,
                                  const CurvePlan& plan, const std::string& model, const CurveRunner& runner,
                                  std::size_t jobs) {
  if (block_of.size() != examples.size()) throw std::invalid_argument("run_curve: block assignment size mismatch");
  std::vector<CurvePoint> points(plan.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.size(); i = next++) {
      const PlanEntry& e = plan[i];
      CurvePoint& pt = points[i];
      pt.model = model;
      pt.n_train_blocks = e.n_train_blocks;
      pt.repeat = e.repeat;
      try {
        std::vector<Example> train_set, test_set;
        for (std::size_t u = 0; u < examples.size(); ++u) {
          const std::size_t b = block_of[u];
          if (std::find(e.train_blocks.begin(), e.train_blocks.end(), b) != e.train_blocks.end()) {
            train_set.push_back(examples[u]);
          } else if (std::find(e.test_blocks.begin(), e.test_blocks.end(), b) != e.test_blocks.end()) {
            test_set.push_back(examples[u]);
          }
        }
        pt.n_examples = train_set.size();
        pt.accuracy = runner(train_set, test_set, e.seed);
      } catch (const std::exception& ex) {
        pt.ok = false;
        pt.accuracy = std::numeric_limits<double>::quiet_NaN();
        pt.error = ex.what();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, plan.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  return points;
}

namespace {

double tricube(double u) {
  u = std::abs(u);
  if (u >= 1.0) return 0.0;
  const double c = 1.0 - u * u * u;
  return c * c * c;
}

double bisquare(double u) {
  u = std::abs(u);
  if (u >= 1.0) return 0.0;
  const double c = 1.0 - u * u;
  return c * c;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<Point> lowess(std::span<const Point> points, double frac, std::size_t iters) {
  if (!(frac > 0.0 && frac <= 1.0)) throw std::invalid_argument("lowess: frac must lie in (0, 1]");
  std::vector<Point> pts(points.begin(), points.end());
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  const std::size_t n = pts.size();
  if (n < 2 || pts.front().x == pts.back().x) throw std::invalid_argument("lowess: need at least 2 distinct x values");
  const std::size_t r = std::min(n, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n))));

  std::vector<double> robust(n, 1.0), fitted(n, 0.0), dist(n);
  for (std::size_t it = 0; it <= iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) dist[j] = std::abs(pts[j].x - pts[i].x);
      std::vector<double> sorted = dist;
      std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(r - 1), sorted.end());
      const double h = sorted[r - 1];
      double sw = 0, sx = 0, sy = 0;
      std::vector<double> w(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double base = h > 0.0 ? tricube(dist[j] / h) : (dist[j] == 0.0 ? 1.0 : 0.0);
        w[j] = base * robust[j];
        sw += w[j];
        sx += w[j] * pts[j].x;
        sy += w[j] * pts[j].y;
      }
      if (sw <= 0.0) continue;  // every neighbour rejected as an outlier: keep the previous fit
      const double mx = sx / sw, my = sy / sw;
      double sxx = 0, sxy = 0;
      for (std::size_t j = 0; j < n; ++j) {
        sxx += w[j] * (pts[j].x - mx) * (pts[j].x - mx);
        sxy += w[j] * (pts[j].x - mx) * (pts[j].y - my);
      }
      const double slope = sxx > 1e-12 * sw * (1.0 + mx * mx) ? sxy / sxx : 0.0;
      fitted[i] = my + slope * (pts[i].x - mx);
    }
    if (it == iters) break;
    std::vector<double> abs_res(n);
    for (std::size_t j = 0; j < n; ++j) abs_res[j] = std::abs(pts[j].y - fitted[j]);
    const double s = median(abs_res);
    if (s <= 0.0) break;
    for (std::size_t j = 0; j < n; ++j) robust[j] = bisquare(abs_res[j] / (6.0 * s));
  }
  std::vector<Point> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = Point{pts[i].x, fitted[i]};
  return out;
}

std::vector<SmoothedPoint> smooth_curve(std::span<const CurvePoint> points, double frac, std::size_t iters) {
  std::map<std::string, std::vector<Point>> by_model;
  std::vector<std::string> order;
  for (const CurvePoint& p : points) {
    if (!p.ok) continue;
    if (!by_model.contains(p.model)) order.push_back(p.model);
    by_model[p.model].push_back(Point{static_cast<double>(p.n_examples), p.accuracy});
  }
  std::vector<SmoothedPoint> out;
  for (const std::string& m : order) {
    const auto& pts = by_model[m];
    std::set<double> xs;
    for (const Point& p : pts) xs.insert(p.x);
    if (xs.size() < 2) {
      for (double x : xs) {
        double s = 0;
        for (const Point& p : pts) s += p.y;
        out.push_back(SmoothedPoint{m, x, s / static_cast<double>(pts.size())});
      }
      continue;
    }
    double last_x = std::numeric_limits<double>::quiet_NaN();
    for (const Point& p : lowess(pts, frac, iters)) {
      if (p.x == last_x) continue;
      last_x = p.x;
      out.push_back(SmoothedPoint{m, p.x, p.y});
    }
  }
  return out;
}

std::string curve_csv(std::span<const CurvePoint> points) {
  std::ostringstream os;
  os << "model,n_blocks,repeat,n_examples,accuracy\n";
  for (const CurvePoint& p : points) {
    os << p.model << ',' << p.n_train_blocks << ',' << p.repeat << ',' << p.n_examples << ','
       << (p.ok ? fmt(p.accuracy) : std::string("nan")) << '\n';
  }
  return os.str();
}

std::string smoothed_csv(std::span<const SmoothedPoint> points) {
  std::ostringstream os;
  os << "model,n_examples,accuracy_smoothed\n";
  for (const SmoothedPoint& p : points) os << p.model << ',' << p.n_examples << ',' << fmt(p.accuracy) << '\n';
  return os.str();
}

std::string curve_svg(std::span<const CurvePoint> points, std::span<const SmoothedPoint> smoothed) {
  const double W = 640, H = 420, left = 60, right = 20, top = 20, bottom = 50;
  double xmax = 1.0;
  for (const CurvePoint& p : points) xmax = std::max(xmax, static_cast<double>(p.n_examples));
  auto sx = [&](double x) { return left + (W - left - right) * x / xmax; };
  auto sy = [&](double y) { return top + (H - top - bottom) * (1.0 - y); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::vector<std::string> models;
  for (const CurvePoint& p : points) {
    if (std::find(models.begin(), models.end(), p.model) == models.end()) models.push_back(p.model);
  }
  auto color = [&](const std::string& m) {
    const auto i = static_cast<std::size_t>(std::find(models.begin(), models.end(), m) - models.begin());
    return colors[i % 5];
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << sy(0) << "\" x2=\"" << W - right << "\" y2=\"" << sy(0) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << sy(0) << "\" x2=\"" << left << "\" y2=\"" << sy(1) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0;
    os << "<text x=\"" << left - 8 << "\" y=\"" << sy(y) + 4 << "\" text-anchor=\"end\">" << fmt(y).substr(0, 4) << "</text>\n";
  }
  os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">training examples</text>\n";
  os << "<text x=\"" << left - 45 << "\" y=\"" << (top + H - bottom) / 2 << "\" transform=\"rotate(-90 " << left - 45 << ' '
     << (top + H - bottom) / 2 << ")\" text-anchor=\"middle\">accuracy</text>\n";
  for (const CurvePoint& p : points) {
    if (!p.ok) continue;
    os << "<circle cx=\"" << sx(static_cast<double>(p.n_examples)) << "\" cy=\"" << sy(p.accuracy) << "\" r=\"2.5\" fill=\""
       << color(p.model) << "\" fill-opacity=\"0.5\"/>\n";
  }
  for (std::size_t m = 0; m < models.size(); ++m) {
    os << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << color(models[m]) << "\" points=\"";
    for (const SmoothedPoint& s : smoothed) {
      if (s.model == models[m]) os << sx(s.n_examples) << ',' << sy(s.accuracy) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << left + 10 << "\" y=\"" << top + 14 + 16 * static_cast<double>(m) << "\" fill=\"" << color(models[m])
       << "\">" << models[m] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace capslu
