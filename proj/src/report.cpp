#include "fedmae/report.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "fedmae/checkpoint.hpp"
#include "fedmae/error.hpp"
#include "fedmae/pipeline.hpp"

namespace fedmae {

namespace fs = std::filesystem;

namespace {

const std::map<std::string, std::string>& required_grid_key() {
  static const std::map<std::string, std::string> m = {
      {"ablation-depth", "depth"},     {"ablation-ppre", "p_pre"},
      {"sweep-alpha", "alpha"},        {"sweep-clients", "clients_per_round"},
      {"sweep-epochs", "local_epochs"}, {"sweep-ratio", "mask_ratio"},
      {"sweep-rounds", "rounds"},      {"server-data", "server_images"}};
  return m;
}

bool is_downstream(const std::string& kind) {
  return kind != "pretrain" && kind != "linear-oracle" && kind != "reconstruct";
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (auto& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && std::string_view(".-=+").find(c) == std::string_view::npos)
      c = '_';
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(split(line, ','));
  }
  return rows;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Pretraining depends on the data, partition and federated keys only, so jobs
// that differ downstream share one cached run per seed.
std::string pretrain_cache_key(const KeyValueConfig& cfg) {
  static const std::set<std::string> skip = {"checkpoint_every", "checkpoint_dir", "parallel",
                                             "workers"};
  std::set<std::string> relevant = FedRunConfig::keys();
  relevant.insert({"dataset", "per_class", "num_classes", "noise", "channels", "height", "width",
                   "alpha"});
  std::string key;
  for (const auto& [k, v] : cfg.entries())
    if (relevant.count(k) && !skip.count(k)) key += k + "=" + v + ";";
  return key;
}

std::mutex& cache_mutex(const std::string& key) {
  static std::mutex guard;
  static std::map<std::string, std::unique_ptr<std::mutex>> locks;
  std::lock_guard<std::mutex> lock(guard);
  auto& m = locks[key];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

// Sources are always read back from their checkpoints, so a cached and a
// fresh run see the same float32-rounded weights.
std::vector<MaeModel> cached_sources(const fs::path& out, const KeyValueConfig& cfg,
                                     const PipelineConfig& pc, const PipelineData& data,
                                     double* final_loss) {
  const std::string key = pretrain_cache_key(cfg);
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(key);
  const fs::path dir = out / "cache" / hex.str();
  std::lock_guard<std::mutex> lock(cache_mutex(dir.string()));
  const fs::path done = dir / "done";
  if (!fs::exists(done)) {
    fs::create_directories(dir);
    PipelineConfig local = pc;
    local.fed.checkpoint_every = 0;
    local.fed.checkpoint_dir.clear();
    const PretrainResult r = pretrain_sources(local, data);
    for (std::size_t i = 0; i < r.sources.size(); ++i)
      save_mae(dir / ("source_" + std::to_string(i) + ".ckpt"), r.sources[i]);
    r.metrics.write_csv(dir / "metrics.csv");
    write_text_atomic(dir / "key.txt", key + "\n");
    write_text_atomic(done, std::to_string(r.sources.size()) + "\n" + format_double(r.final_loss) +
                                "\n");
  }
  std::istringstream in(read_text(done));
  std::size_t count = 0;
  std::string loss;
  in >> count >> loss;
  if (final_loss) *final_loss = loss.empty() ? std::nan("") : parse_double(loss, "cached loss");
  std::vector<MaeModel> sources;
  for (std::size_t i = 0; i < count; ++i)
    sources.push_back(load_mae(dir / ("source_" + std::to_string(i) + ".ckpt")));
  return sources;
}

}  // namespace

// ---------------------------------------------------------------------------

const std::vector<std::string>& ExperimentPlan::kinds() {
  static const std::vector<std::string> k = {
      "pretrain",    "cascade-finetune", "ablation-depth", "ablation-ppre",
      "sweep-alpha", "sweep-clients",    "sweep-epochs",   "sweep-ratio",
      "sweep-rounds", "server-data",     "linear-oracle",  "reconstruct"};
  return k;
}

ExperimentPlan ExperimentPlan::parse(const KeyValueConfig& cfg) {
  ExperimentPlan plan;
  for (const auto& [key, value] : cfg.entries()) {
    if (key == "kind") {
      plan.kind = value;
    } else if (key == "seeds") {
      for (const auto& s : cfg.get_list(key)) {
        const auto v = parse_int(s, "seeds");
        require(v >= 0, "plan: seeds must be non-negative");
        plan.seeds.push_back(static_cast<std::uint64_t>(v));
      }
    } else if (key == "out") {
      plan.out = value;
    } else if (key == "workers") {
      const auto v = cfg.get_int(key);
      require(v >= 1, "plan: workers must be >= 1");
      plan.workers = static_cast<std::size_t>(v);
    } else if (key.rfind("grid.", 0) == 0) {
      const std::string name = key.substr(5);
      require(!name.empty(), "plan: empty grid key");
      plan.grid[name] = cfg.get_list(key);
    } else {
      plan.base.set(key, value);
    }
  }
  plan.validate();
  return plan;
}

ExperimentPlan ExperimentPlan::load(const fs::path& path) {
  return parse(KeyValueConfig::load(path));
}

void ExperimentPlan::validate() const {
  const auto& k = kinds();
  require(std::find(k.begin(), k.end(), kind) != k.end(), "plan: unknown kind '" + kind + "'");
  require(!grid.empty(), "plan: grid is empty");
  for (const auto& [key, values] : grid) {
    require(!values.empty(), "plan: grid." + key + " has no values");
    require(key != "seed", "plan: seeds are given by the seeds key, not the grid");
    require(PipelineConfig::keys().count(key), "plan: unknown grid key '" + key + "'");
  }
  require(!seeds.empty(), "plan: seeds list is empty");
  require(!out.empty(), "plan: out directory is required");
  require(!base.has("seed"), "plan: seeds are given by the seeds key");
  auto req = required_grid_key().find(kind);
  if (req != required_grid_key().end())
    require(grid.count(req->second), "plan: kind " + kind + " needs grid." + req->second);
  std::set<std::string> ids;
  for (const auto& job : jobs()) {
    require(ids.insert(job.id).second, "plan: two grid points map to job id " + job.id);
    try {
      PipelineConfig::from_config(job_config(job));
    } catch (const Error& e) {
      throw ValidationError("plan: job " + job.id + ": " + e.what());
    }
  }
}

std::vector<ExperimentPlan::Job> ExperimentPlan::jobs() const {
  std::vector<std::map<std::string, std::string>> points(1);
  for (const auto& [key, values] : grid) {
    std::vector<std::map<std::string, std::string>> next;
    for (const auto& p : points)
      for (const auto& v : values) {
        auto q = p;
        q[key] = v;
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  std::vector<Job> out;
  for (const auto& p : points)
    for (auto s : seeds) {
      Job j;
      j.point = p;
      j.seed = s;
      std::vector<std::string> parts;
      for (const auto& [k, v] : p) parts.push_back(k + "=" + v);
      parts.push_back("seed=" + std::to_string(s));
      j.id = sanitize(join(parts, "+"));
      out.push_back(std::move(j));
    }
  return out;
}

KeyValueConfig ExperimentPlan::job_config(const Job& job) const {
  KeyValueConfig c = base;
  for (const auto& [k, v] : job.point) c.set(k, v);
  c.set("seed", std::to_string(job.seed));
  return c;
}

// ---------------------------------------------------------------------------

JobResult run_job(const ExperimentPlan& plan, const ExperimentPlan::Job& job) {
  const KeyValueConfig cfg = plan.job_config(job);
  const PipelineConfig pc = PipelineConfig::from_config(cfg);
  const fs::path jobs_dir = plan.out / "jobs";
  fs::create_directories(jobs_dir);
  JobResult r;

  if (plan.kind == "linear-oracle") {
    const auto rows = run_oracle_sweep(pc.oracle);
    write_oracle_csv(jobs_dir / (job.id + ".oracle.csv"), rows);
    r.metric_names = {"lambda", "residual_closed_form", "residual_gd", "gap"};
    for (const auto& row : rows) {
      r.rows.push_back({row.lambda, row.residual_closed_form, row.residual_gd, row.gap});
      r.row_keys.push_back({{"K", std::to_string(row.K)}});
    }
    return r;
  }

  const PipelineData data = make_pipeline_data(pc);
  if (plan.kind == "pretrain") {
    double loss = 0.0;
    cached_sources(plan.out, cfg, pc, data, &loss);
    r.metric_names = {"final_loss"};
    r.rows.push_back({loss});
    r.row_keys.emplace_back();
    return r;
  }

  if (plan.kind == "reconstruct") {
    double loss = 0.0;
    const auto sources = cached_sources(plan.out, cfg, pc, data, &loss);
    CascadeSpec pre = cascade_spec(pc);
    CascadeSpec fresh = pre;
    fresh.pretrained = 0;
    fresh.sources.clear();
    fresh.replicate.reset();
    const MaeModel pretrained_mae = assemble_multiblock_mae(sources, pre);
    const MaeModel fresh_mae = assemble_multiblock_mae(sources, fresh);
    const std::size_t held = std::min(pc.heldout_images, data.test.n);
    std::vector<std::size_t> ids(held);
    for (std::size_t i = 0; i < held; ++i) ids[i] = i;
    const PatchSequence heldout = data.test_patches.subset(ids);
    const RngStream eval_rng = RngStream(pc.seed).derive("heldout-mask", 0);
    r.metric_names = {"recon_loss_pretrained", "recon_loss_fresh"};
    r.rows.push_back({heldout_recon_loss(pretrained_mae, heldout, pc.fed.mask_ratio, eval_rng),
                      heldout_recon_loss(fresh_mae, heldout, pc.fed.mask_ratio, eval_rng)});
    r.row_keys.emplace_back();
    if (pc.dump_rows > 0) {
      std::vector<std::size_t> rows(std::min(pc.dump_rows, data.test.n));
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
      reconstruct_dump(fresh_mae, pretrained_mae, data.test.subset(rows), pc.fed.mask_ratio,
                       RngStream(pc.seed).derive("dump-mask", 0), jobs_dir / (job.id + ".ppm"));
    }
    return r;
  }

  double pretrain_loss = std::nan("");
  std::vector<MaeModel> sources;
  const bool refine = pc.server_images > 0 && pc.refine.epochs > 0;
  if (pc.p_pre > 0 || refine) sources = cached_sources(plan.out, cfg, pc, data, &pretrain_loss);
  const DownstreamResult d = run_downstream(pc, data, sources);
  r.metric_names = {"accuracy", "pretrain_loss"};
  r.rows.push_back({d.accuracy, pretrain_loss});
  r.row_keys.emplace_back();
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> extra_key_columns(const std::string& kind) {
  if (kind == "linear-oracle") return {"K"};
  return {};
}

std::string job_csv(const ExperimentPlan& plan, const ExperimentPlan::Job& job, const JobResult& r) {
  std::ostringstream os;
  std::vector<std::string> header = {"job", "seed"};
  for (const auto& [k, v] : plan.grid) header.push_back(k);
  for (const auto& k : extra_key_columns(plan.kind)) header.push_back(k);
  for (const auto& m : r.metric_names) header.push_back(m);
  os << join(header, ",") << "\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    std::vector<std::string> cells = {job.id, std::to_string(job.seed)};
    for (const auto& [k, v] : plan.grid) cells.push_back(job.point.at(k));
    for (const auto& k : extra_key_columns(plan.kind)) cells.push_back(r.row_keys[i].at(k));
    for (double v : r.rows[i]) cells.push_back(format_double(v));
    os << join(cells, ",") << "\n";
  }
  return os.str();
}

void write_manifest(const ExperimentPlan& plan, const std::vector<ExperimentPlan::Job>& jobs) {
  std::vector<std::string> group;
  for (const auto& [k, v] : plan.grid) group.push_back(k);
  for (const auto& k : extra_key_columns(plan.kind)) group.push_back(k);
  std::vector<std::string> ids;
  for (const auto& j : jobs) ids.push_back(j.id);
  KeyValueConfig m;
  m.set("kind", plan.kind);
  m.set("group_columns", join(group, ","));
  m.set("jobs", join(ids, ","));
  write_text_atomic(plan.out / "manifest.txt", m.to_string());
}

void write_accuracy_csv(const ExperimentPlan& plan, const std::vector<ExperimentPlan::Job>& jobs) {
  std::ostringstream os;
  os << "depth,p_pre,seed,label_fraction,accuracy\n";
  for (const auto& job : jobs) {
    const fs::path p = plan.out / "jobs" / (job.id + ".csv");
    if (!fs::exists(p)) continue;
    const auto rows = read_csv(p);
    if (rows.size() < 2) continue;
    const auto& header = rows[0];
    const auto col = std::find(header.begin(), header.end(), "accuracy") - header.begin();
    const PipelineConfig pc = PipelineConfig::from_config(plan.job_config(job));
    os << pc.depth << ',' << pc.p_pre << ',' << job.seed << ',' << format_double(pc.label_fraction)
       << ',' << rows[1][static_cast<std::size_t>(col)] << "\n";
  }
  write_text_atomic(plan.out / "accuracy.csv", os.str());
}

}  // namespace

PlanOutcome run_plan(const ExperimentPlan& plan) {
  plan.validate();
  const auto jobs = plan.jobs();
  const fs::path jobs_dir = plan.out / "jobs";
  fs::create_directories(jobs_dir);
  write_manifest(plan, jobs);

  PlanOutcome outcome;
  outcome.total = jobs.size();
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (fs::exists(jobs_dir / (jobs[i].id + ".csv")))
      ++outcome.skipped;
    else
      pending.push_back(i);
  }

  std::atomic<std::size_t> next{0}, failed{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < pending.size(); k = next++) {
      const auto& job = jobs[pending[k]];
      const fs::path err = jobs_dir / (job.id + ".err");
      try {
        const JobResult r = run_job(plan, job);
        write_text_atomic(jobs_dir / (job.id + ".csv"), job_csv(plan, job, r));
        std::error_code ec;
        fs::remove(err, ec);
      } catch (const std::exception& e) {
        ++failed;
        std::ofstream(err) << e.what() << "\n";
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(plan.workers, pending.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  outcome.ran = pending.size() - failed;
  outcome.failed = failed;

  // Merge in job order.
  std::ostringstream merged;
  bool header_done = false;
  std::string header;
  for (const auto& job : jobs) {
    const fs::path p = jobs_dir / (job.id + ".csv");
    if (!fs::exists(p)) continue;
    std::istringstream in(read_text(p));
    std::string line;
    std::getline(in, line);
    if (!header_done) {
      header = line;
      merged << line << "\n";
      header_done = true;
    } else if (line != header) {
      throw IoError("job " + job.id + " has columns that differ from the other jobs");
    }
    while (std::getline(in, line))
      if (!line.empty()) merged << line << "\n";
  }
  write_text_atomic(plan.out / "results.csv", merged.str());
  if (is_downstream(plan.kind)) write_accuracy_csv(plan, jobs);
  summarize(plan.out);
  return outcome;
}

// ---------------------------------------------------------------------------

SummaryStats summary_stats(std::vector<double> values) {
  SummaryStats s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    if (lo == hi) return values[lo];
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.median = quantile(0.5);
  s.q1 = quantile(0.25);
  s.q3 = quantile(0.75);
  return s;
}

Summary summarize(const fs::path& dir) {
  const KeyValueConfig manifest = KeyValueConfig::load(dir / "manifest.txt");
  Summary summary;
  summary.group_columns = manifest.get_list("group_columns");
  const auto job_ids = manifest.get_list("jobs");

  std::vector<std::vector<std::string>> rows;
  if (fs::exists(dir / "results.csv")) rows = read_csv(dir / "results.csv");
  std::vector<std::string> header = rows.empty() ? std::vector<std::string>{} : rows.front();
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IoError("results.csv lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };

  std::set<std::string> seen_jobs;
  std::map<std::pair<std::vector<std::string>, std::string>, std::vector<double>> values;
  if (!header.empty()) {
    const std::set<std::string> non_metric = [&] {
      std::set<std::string> s(summary.group_columns.begin(), summary.group_columns.end());
      s.insert({"job", "seed"});
      return s;
    }();
    std::vector<std::size_t> group_idx;
    for (const auto& g : summary.group_columns) group_idx.push_back(column(g));
    const std::size_t job_idx = column("job");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (row.size() != header.size()) throw IoError("results.csv: ragged row " + std::to_string(r));
      seen_jobs.insert(row[job_idx]);
      std::vector<std::string> key;
      for (auto i : group_idx) key.push_back(row[i]);
      for (std::size_t c = 0; c < header.size(); ++c) {
        if (non_metric.count(header[c])) continue;
        auto& bucket = values[{key, header[c]}];
        if (!row[c].empty()) bucket.push_back(parse_double(row[c], header[c]));
      }
    }
  }
  for (const auto& id : job_ids)
    if (!seen_jobs.count(id)) summary.missing_jobs.push_back(id);

  for (const auto& [key, vals] : values) {
    SummaryGroup g;
    g.key = key.first;
    g.metric = key.second;
    g.stats = summary_stats(vals);
    summary.groups.push_back(std::move(g));
  }

  std::ostringstream csv, txt;
  std::vector<std::string> head = summary.group_columns;
  for (const char* h : {"metric", "count", "median", "q1", "q3", "iqr"}) head.push_back(h);
  csv << join(head, ",") << "\n";
  std::vector<std::vector<std::string>> table = {head};
  for (const auto& g : summary.groups) {
    std::vector<std::string> cells = g.key;
    cells.push_back(g.metric);
    cells.push_back(std::to_string(g.stats.count));
    if (g.stats.count) {
      for (double v : {g.stats.median, g.stats.q1, g.stats.q3, g.stats.q3 - g.stats.q1})
        cells.push_back(format_double(v));
    } else {
      cells.insert(cells.end(), 4, "");
    }
    csv << join(cells, ",") << "\n";
    std::vector<std::string> shown = g.key;
    shown.push_back(g.metric);
    shown.push_back(std::to_string(g.stats.count));
    for (double v : {g.stats.median, g.stats.q1, g.stats.q3, g.stats.q3 - g.stats.q1}) {
      std::ostringstream os;
      if (g.stats.count)
        os << std::setprecision(4) << v;
      else
        os << "-";
      shown.push_back(os.str());
    }
    table.push_back(std::move(shown));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : table)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c)
      txt << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << row[c];
    txt << "\n";
  }
  if (!summary.missing_jobs.empty()) {
    txt << "\nmissing jobs (" << summary.missing_jobs.size() << "):\n";
    for (const auto& id : summary.missing_jobs) txt << "  " << id << "\n";
  }
  write_text_atomic(dir / "summary.csv", csv.str());
  write_text_atomic(dir / "summary.txt", txt.str());
  return summary;
}

}  // namespace fedmae
