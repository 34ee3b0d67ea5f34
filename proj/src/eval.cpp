#include "dmac/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <mutex>
#include <thread>

#include "json.hpp"

#include "dmac/comm.hpp"
#include "dmac/errors.hpp"
#include "text_io.hpp"

namespace dmac::eval {

FrequencyMatrix FrequencyMatrix::from_channels(int agents, const std::vector<double>& per_channel) {
  const comm::ChannelSet set(agents);
  if (static_cast<int>(per_channel.size()) != set.size()) throw ShapeError("frequency vector != channel count");
  FrequencyMatrix f{Matrix::Zero(agents, agents)};
  for (int c = 0; c < set.size(); ++c) {
    const auto [i, j] = set[c];
    f.values(i, j) = f.values(j, i) = per_channel[c];
  }
  return f;
}

std::vector<double> FrequencyMatrix::upper() const {
  std::vector<double> out;
  for (int i = 0; i < size(); ++i)
    for (int j = i + 1; j < size(); ++j) out.push_back(values(i, j));
  return out;
}

bool FrequencyMatrix::operator==(const FrequencyMatrix& other) const {
  return values.rows() == other.values.rows() && values.cols() == other.values.cols() && values == other.values;
}

FrequencySummary summarize(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("no frequencies to summarize");
  FrequencySummary s;
  s.high = *std::max_element(v.begin(), v.end());
  s.low = *std::min_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.average = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.average) * (x - s.average);
  s.sd = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

FrequencySummary frequency_summary(const FrequencyMatrix& matrix) {
  if (matrix.size() < 2) throw std::invalid_argument("frequency matrix needs at least two agents");
  return summarize(matrix.upper());
}

bool EvalReport::operator==(const EvalReport& o) const {
  return condition == o.condition && episodes == o.episodes && wins == o.wins && win_rate == o.win_rate &&
         mean_return == o.mean_return && mean_masks == o.mean_masks && delivered == o.delivered &&
         frequency == o.frequency && summary == o.summary;
}

EvalReport evaluate(const env::Environment& environment, const team::TeamPolicy& policy,
                    const team::Interferer* interferer, const std::string& condition, const EvalOptions& options) {
  if (options.episodes < 1) throw std::invalid_argument("evaluation needs at least one episode");
  const int n = environment.agent_count();
  const int channels = comm::channel_count(n);
  std::vector<team::EpisodeResult> results(options.episodes);

  int workers = options.workers > 0 ? options.workers : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, options.episodes);
  auto run = [&](int w) {
    auto env_copy = environment.clone();
    std::unique_ptr<team::Interferer> hook = interferer ? interferer->clone() : nullptr;
    for (int k = w; k < options.episodes; k += workers)
      results[k] = team::run_episode(*env_copy, policy, derive_seed(options.seed, 70, k), team::RolloutOptions{},
                                     hook.get());
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          run(w);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  EvalReport r;
  r.condition = condition;
  r.episodes = options.episodes;
  std::vector<double> per_channel(channels, 0.0);
  double returns = 0.0, masks = 0.0;
  for (const auto& res : results) {
    r.wins += res.win ? 1 : 0;
    returns += res.team_return;
    masks += res.masks;
    for (int c = 0; c < channels; ++c) {
      per_channel[c] += res.delivered[c];
      r.delivered += res.delivered[c];
    }
  }
  for (double& v : per_channel) v /= options.episodes;
  r.win_rate = static_cast<double>(r.wins) / options.episodes;
  r.mean_return = returns / options.episodes;
  r.mean_masks = masks / options.episodes;
  r.frequency = FrequencyMatrix::from_channels(n, per_channel);
  r.summary = frequency_summary(r.frequency);
  return r;
}

void write_heatmap(const FrequencyMatrix& matrix, std::ostream& out) {
  out << "dmac-heatmap 1\n" << matrix.size() << '\n';
  for (int i = 0; i < matrix.size(); ++i) {
    for (int j = 0; j < matrix.size(); ++j) {
      if (j > 0) out << ' ';
      if (i == j)
        out << "null";
      else
        detail::write_double(out, matrix.values(i, j));
    }
    out << '\n';
  }
}

FrequencyMatrix read_heatmap(std::istream& in) {
  detail::expect(in, "dmac-heatmap");
  detail::expect(in, "1");
  int n = 0;
  if (!(in >> n) || n < 2) throw IoError("bad heatmap size");
  FrequencyMatrix f{Matrix::Zero(n, n)};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) {
        detail::expect(in, "null");
        continue;
      }
      f.values(i, j) = detail::read_double(in);
    }
  if (f.values != f.values.transpose())
    throw IoError("heatmap is not symmetric");
  return f;
}

void export_heatmap(const FrequencyMatrix& matrix, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_heatmap(matrix, out);
  if (!out) throw IoError("failed writing " + path.string());
}

FrequencyMatrix import_heatmap(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return read_heatmap(in);
}

std::string report_json(const EvalReport& r, const std::string& heatmap_file) {
  nlohmann::ordered_json j;
  j["format"] = "dmac-eval-report";
  j["version"] = 1;
  j["condition"] = r.condition;
  j["episodes"] = r.episodes;
  j["wins"] = r.wins;
  j["win_rate"] = r.win_rate;
  j["mean_return"] = r.mean_return;
  j["mean_masks"] = r.mean_masks;
  j["delivered"] = r.delivered;
  j["summary"] = {{"high", r.summary.high}, {"low", r.summary.low}, {"average", r.summary.average}, {"sd", r.summary.sd}};
  j["heatmap"] = heatmap_file;
  return j.dump(2) + "\n";
}

EvalReport parse_report_json(const std::string& text, FrequencyMatrix frequency) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "dmac-eval-report" || j.at("version") != 1) throw IoError("not an evaluation report");
    EvalReport r;
    r.condition = j.at("condition").get<std::string>();
    r.episodes = j.at("episodes").get<int>();
    r.wins = j.at("wins").get<int>();
    r.win_rate = j.at("win_rate").get<double>();
    r.mean_return = j.at("mean_return").get<double>();
    r.mean_masks = j.at("mean_masks").get<double>();
    r.delivered = j.at("delivered").get<long long>();
    const auto& s = j.at("summary");
    r.summary = {s.at("high").get<double>(), s.at("low").get<double>(), s.at("average").get<double>(),
                 s.at("sd").get<double>()};
    r.frequency = std::move(frequency);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed evaluation report: ") + e.what());
  }
}

}  // namespace dmac::eval
