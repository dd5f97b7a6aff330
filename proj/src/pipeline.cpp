#include "vitsig/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vitsig/parallel.hpp"
#include "vitsig/rng.hpp"
#include "vitsig/vtf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vitsig {

namespace {

// %.17g keeps doubles round-trippable and runs byte-reproducible.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number '" + s + "' for " + key);
  }
}

int to_int(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer '" + s + "' for " + key);
  }
}

AttackSpec parse_attack(const std::string& value) {
  std::istringstream ss(value);
  std::string family;
  ss >> family;
  AttackSpec spec;
  if (family == "fgsm") {
    spec.family = AttackFamily::kFgsm;
  } else if (family == "pgd") {
    spec.family = AttackFamily::kPgd;
  } else if (family == "cw") {
    spec.family = AttackFamily::kCw;
  } else {
    throw ConfigError("config: unknown attack family '" + family + "'");
  }
  std::string kv;
  while (ss >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("config: attack parameter '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    if (key == "eps") {
      spec.epsilon = to_double(val, "attack eps");
    } else if (key == "alpha") {
      spec.alpha = to_double(val, "attack alpha");
    } else if (key == "iters") {
      spec.iters = to_int(val, "attack iters");
    } else if (key == "c") {
      spec.c = to_double(val, "attack c");
    } else if (key == "kappa") {
      spec.kappa = to_double(val, "attack kappa");
    } else if (key == "steps") {
      spec.cw_steps = to_int(val, "attack steps");
    } else if (key == "lr") {
      spec.cw_lr = to_double(val, "attack lr");
    } else {
      throw ConfigError("config: unknown attack parameter '" + key + "'");
    }
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return spec;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing " + path.string());
  json j;
  f >> j;
  return j;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(split(line, ','));
  }
  if (rows.empty()) throw DataError("empty csv " + path.string());
  return rows;
}

// ---- shared stage plumbing --------------------------------------------------

struct EvalSet {
  std::vector<LabeledImage> samples;  // first eval_count of the dataset
};

EvalSet load_eval_set(const RunConfig& cfg) {
  auto all = load_dataset((fs::path(cfg.out_dir) / "dataset").string());
  EvalSet ev;
  const std::size_t n = std::min<std::size_t>(all.size(), static_cast<std::size_t>(cfg.eval_count));
  if (n == 0) throw DataError("evaluation set is empty");
  ev.samples.assign(all.begin(), all.begin() + static_cast<long>(n));
  return ev;
}

// Disjoint sequential groups of m over a seed-shuffled eval order; the same
// composition is reused for clean and attacked sets.
std::vector<std::vector<std::size_t>> cka_batches(const RunConfig& cfg, std::size_t count) {
  const std::size_t m = static_cast<std::size_t>(cfg.cka_m);
  if (m < 2) throw ConfigError("config: cka.m must be at least 2");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(Rng::derive(cfg.seed, {0xcccaull}));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + m <= count; start += m) {
    batches.emplace_back(order.begin() + static_cast<long>(start),
                         order.begin() + static_cast<long>(start + m));
  }
  if (batches.empty()) throw DataError("not enough samples for one CKA batch of " + std::to_string(m));
  return batches;
}

struct SetSignatures {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<int> predicted;
  std::vector<std::vector<double>> posteriors;
  std::vector<double> fr, ph, s_ap;
  std::vector<std::vector<std::vector<double>>> profiles;  // [sample][block][head]
  std::vector<CkaMatrix> batch_cka;
  std::vector<double> s_cka_per_batch;
  CkaDifference aggregate;  // vs the reference matrix
};

// Forward every sample with a trace and reduce to signature values.
SetSignatures extract_set(const RunConfig& cfg, const ViTWeights& weights,
                          const std::vector<LabeledImage>& samples,
                          const std::vector<std::vector<double>>& ref_profile,
                          const CkaMatrix& m_ref,
                          const std::vector<std::vector<std::size_t>>& batches) {
  const PatchGrid grid = PatchGrid::regular(weights.config.image_side, weights.config.patch_side);
  const int phi = cfg.effective_phi();

  std::vector<InferenceTrace> traces(samples.size());
  SetSignatures out;
  out.ids.resize(samples.size());
  out.labels.resize(samples.size());
  out.predicted.resize(samples.size());
  out.posteriors.resize(samples.size());
  out.fr.resize(samples.size());
  out.ph.resize(samples.size());
  out.s_ap.resize(samples.size());
  out.profiles.resize(samples.size());

  parallel_for(samples.size(), cfg.effective_threads(), [&](std::size_t i) {
    traces[i] = vit_forward(weights, samples[i].image);
    out.ids[i] = samples[i].id;
    out.labels[i] = samples[i].label;
    out.predicted[i] = traces[i].predicted;
    out.posteriors[i] = traces[i].posterior;
    out.fr[i] = frequency_ratio(samples[i].image, phi);
    out.ph[i] = posterior_entropy(traces[i].posterior);
    out.profiles[i] = attention_profile(traces[i], grid);
    out.s_ap[i] = attention_profile_summary(out.profiles[i], ref_profile);
  });

  out.batch_cka.reserve(batches.size());
  for (const auto& batch : batches) {
    std::vector<const InferenceTrace*> members;
    members.reserve(batch.size());
    for (std::size_t ix : batch) members.push_back(&traces[ix]);
    CkaMatrix m = cka_matrix(collect_latents(members));
    out.s_cka_per_batch.push_back(cka_difference(m_ref, {m}).s_cka);
    out.batch_cka.push_back(std::move(m));
  }
  out.aggregate = cka_difference(m_ref, out.batch_cka);
  return out;
}

std::string signature_header(int depth, int heads) {
  std::string h = "sample_id,attack_tag,fr,ph";
  for (int b = 0; b < depth; ++b) {
    for (int j = 0; j < heads; ++j) h += ",ad_b" + std::to_string(b) + "h" + std::to_string(j);
  }
  return h + ",s_ap";
}

void write_signatures(const fs::path& dir, const std::string& tag, const SetSignatures& s,
                      int depth, int heads) {
  std::ostringstream csv;
  csv << signature_header(depth, heads) << "\n";
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    csv << s.ids[i] << "," << tag << "," << fmt(s.fr[i]) << "," << fmt(s.ph[i]);
    for (const auto& row : s.profiles[i]) {
      for (double ad : row) csv << "," << fmt(ad);
    }
    csv << "," << fmt(s.s_ap[i]) << "\n";
  }
  write_text(dir / (tag + ".csv"), csv.str());

  std::ostringstream post;
  post << "sample_id,attack_tag,label,predicted";
  const std::size_t k = s.posteriors.empty() ? 0 : s.posteriors[0].size();
  for (std::size_t c = 0; c < k; ++c) post << ",p" << c;
  post << "\n";
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    post << s.ids[i] << "," << tag << "," << s.labels[i] << "," << s.predicted[i];
    for (double p : s.posteriors[i]) post << "," << fmt(p);
    post << "\n";
  }
  write_text(dir / (tag + "_posteriors.csv"), post.str());
}

void write_cka(const fs::path& dir, const std::string& tag, const SetSignatures& s,
               const std::vector<std::vector<std::size_t>>& batches,
               const std::vector<std::string>& ids, int depth, int cka_m) {
  const int l = s.aggregate.mean.layers;
  const std::size_t nb = s.batch_cka.size();
  Tensor stack(Shape{static_cast<int>(nb), l, l});
  Tensor defined(Shape{static_cast<int>(nb), l, l});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t e = 0; e < static_cast<std::size_t>(l) * l; ++e) {
      stack.data()[b * l * l + e] = s.batch_cka[b].values[e];
      defined.data()[b * l * l + e] = s.batch_cka[b].defined[e];
    }
  }
  vtf::save((dir / ("cka_" + tag + ".vtf")).string(), stack);
  vtf::save((dir / ("cka_" + tag + "_defined.vtf")).string(), defined);
  Tensor mbar(Shape{l, l}, s.aggregate.mean.values);
  Tensor dmat(Shape{l, l}, s.aggregate.d);
  vtf::save((dir / ("cka_" + tag + "_mbar.vtf")).string(), mbar);
  vtf::save((dir / ("cka_" + tag + "_D.vtf")).string(), dmat);

  json meta;
  meta["tag"] = tag;
  meta["m"] = cka_m;
  meta["tap_names"] = tap_names(depth);
  json blist = json::array();
  for (const auto& batch : batches) {
    json b = json::array();
    for (std::size_t ix : batch) b.push_back(ids[ix]);
    blist.push_back(b);
  }
  meta["batches"] = blist;
  meta["s_cka_per_batch"] = s.s_cka_per_batch;
  meta["s_cka_aggregate"] = s.aggregate.s_cka;
  meta["excluded_entries"] = s.aggregate.excluded;
  write_json(dir / ("cka_" + tag + ".json"), meta);
}

std::vector<std::string> attack_tags(const RunConfig& cfg) {
  std::vector<std::string> tags;
  for (const AttackSpec& a : cfg.attacks) tags.push_back(a.tag());
  return tags;
}

struct SignatureTable {
  std::vector<std::string> ids;
  std::vector<double> fr, ph, s_ap;
  std::vector<std::vector<double>> ad;  // [unit][sample], unit = b*heads+h
  int depth = 0, heads = 0;
};

SignatureTable read_signatures(const fs::path& file) {
  auto rows = read_csv(file);
  SignatureTable t;
  const auto& header = rows[0];
  if (header.size() < 5) throw DataError("signature csv too narrow: " + file.string());
  const std::size_t units = header.size() - 5;
  t.ad.resize(units);
  for (const auto& name : header) {
    if (name.rfind("ad_b", 0) == 0) {
      const auto hpos = name.find('h');
      t.depth = std::max(t.depth, to_int(name.substr(4, hpos - 4), "ad col") + 1);
      t.heads = std::max(t.heads, to_int(name.substr(hpos + 1), "ad col") + 1);
    }
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) throw DataError("ragged signature csv: " + file.string());
    t.ids.push_back(row[0]);
    t.fr.push_back(to_double(row[2], "fr"));
    t.ph.push_back(to_double(row[3], "ph"));
    for (std::size_t u = 0; u < units; ++u) t.ad[u].push_back(to_double(row[4 + u], "ad"));
    t.s_ap.push_back(to_double(row.back(), "s_ap"));
  }
  return t;
}

}  // namespace

// ---- configuration -----------------------------------------------------------

std::vector<AttackSpec> default_attack_grid() {
  std::vector<AttackSpec> grid;
  for (double eps : {0.031, 0.062}) {
    AttackSpec a;
    a.family = AttackFamily::kFgsm;
    a.epsilon = eps;
    grid.push_back(a);
  }
  for (double eps : {0.001, 0.003, 0.005, 0.01}) {
    AttackSpec a;
    a.family = AttackFamily::kPgd;
    a.epsilon = eps;
    a.alpha = 0.025;
    a.iters = 40;
    grid.push_back(a);
  }
  AttackSpec cw;
  cw.family = AttackFamily::kCw;
  cw.c = 1e-4;
  cw.kappa = 0.0;
  cw.cw_steps = 100;
  cw.cw_lr = 1e-2;
  grid.push_back(cw);
  return grid;
}

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.attacks = default_attack_grid();
  return cfg;
}

void RunConfig::apply_override(const std::string& key, const std::string& value) {
  if (key == "seed") {
    seed = static_cast<std::uint64_t>(std::stoull(value));
    dataset.seed = seed;
    train.seed = seed;
  } else if (key == "out") {
    out_dir = value;
  } else if (key == "threads") {
    threads = to_int(value, key);
  } else if (key == "phi") {
    phi = to_int(value, key);
  } else if (key == "cka.m") {
    cka_m = to_int(value, key);
  } else if (key == "eval.count") {
    eval_count = to_int(value, key);
  } else if (key == "refine.mode") {
    if (value != "full" && value != "heldout") throw ConfigError("config: refine.mode must be full or heldout");
    refine_mode = value;
  } else if (key == "histogram.bins") {
    histogram_bins = to_int(value, key);
  } else if (key == "dataset.classes") {
    dataset.classes = to_int(value, key);
  } else if (key == "dataset.per_class") {
    dataset.per_class = to_int(value, key);
  } else if (key == "dataset.image_side") {
    dataset.image_side = to_int(value, key);
  } else if (key == "dataset.channels") {
    dataset.channels = to_int(value, key);
  } else if (key == "dataset.noise") {
    dataset.noise = to_double(value, key);
  } else if (key == "vit.patch_side") {
    patch_side = to_int(value, key);
  } else if (key == "vit.depth") {
    depth = to_int(value, key);
  } else if (key == "vit.heads") {
    heads = to_int(value, key);
  } else if (key == "vit.embed_dim") {
    embed_dim = to_int(value, key);
  } else if (key == "vit.mlp_hidden") {
    mlp_hidden = to_int(value, key);
  } else if (key == "train.epochs") {
    train.epochs = to_int(value, key);
  } else if (key == "train.lr") {
    train.lr = to_double(value, key);
  } else if (key == "train.momentum") {
    train.momentum = to_double(value, key);
  } else if (key == "train.batch") {
    train.batch = to_int(value, key);
  } else if (key == "train.target_accuracy") {
    train.target_accuracy = to_double(value, key);
  } else if (key.rfind("attack.", 0) == 0) {
    // attack.N keys replace the default grid; N keeps them ordered
    attacks.push_back(parse_attack(value));
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  RunConfig cfg;
  cfg.attacks.clear();  // file-provided attack.N lines take over; restored below if none
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
    }
    cfg.apply_override(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  if (cfg.attacks.empty()) cfg.attacks = default_attack_grid();
  cfg.dataset.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  return cfg;
}

ViTConfig RunConfig::vit_config() const {
  ViTConfig v;
  v.image_side = dataset.image_side;
  v.channels = dataset.channels;
  v.patch_side = patch_side;
  v.depth = depth;
  v.heads = heads;
  v.embed_dim = embed_dim;
  v.mlp_hidden = mlp_hidden;
  v.num_classes = dataset.classes;
  try {
    v.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return v;
}

int RunConfig::effective_threads() const { return threads > 0 ? threads : default_threads(); }

int RunConfig::effective_phi() const { return phi > 0 ? phi : dataset.image_side; }

// ---- checkpoints --------------------------------------------------------------

void save_checkpoint(const std::string& dir, const ViTWeights& w) {
  fs::create_directories(dir);
  json manifest;
  manifest["config"] = {{"image_side", w.config.image_side}, {"channels", w.config.channels},
                        {"patch_side", w.config.patch_side}, {"depth", w.config.depth},
                        {"heads", w.config.heads},           {"embed_dim", w.config.embed_dim},
                        {"mlp_hidden", w.config.mlp_hidden}, {"num_classes", w.config.num_classes}};
  json tensors;
  for (const auto& [name, t] : w.named_tensors()) {
    const std::string file = "t_" + name + ".vtf";
    vtf::save((fs::path(dir) / file).string(), *t);
    tensors[name] = file;
  }
  manifest["tensors"] = tensors;
  write_json(fs::path(dir) / "manifest.json", manifest);
}

ViTWeights load_checkpoint(const std::string& dir) {
  const json manifest = read_json(fs::path(dir) / "manifest.json");
  ViTConfig cfg;
  const json& c = manifest.at("config");
  cfg.image_side = c.at("image_side");
  cfg.channels = c.at("channels");
  cfg.patch_side = c.at("patch_side");
  cfg.depth = c.at("depth");
  cfg.heads = c.at("heads");
  cfg.embed_dim = c.at("embed_dim");
  cfg.mlp_hidden = c.at("mlp_hidden");
  cfg.num_classes = c.at("num_classes");
  cfg.validate();
  ViTWeights w = ViTWeights::init(cfg, 0);
  const json& tensors = manifest.at("tensors");
  for (auto& [name, t] : w.named_tensors()) {
    if (!tensors.contains(name)) throw DataError("checkpoint: missing tensor " + name);
    Tensor loaded = vtf::load((fs::path(dir) / tensors.at(name).get<std::string>()).string());
    if (loaded.shape() != t->shape()) {
      throw DataError("checkpoint: tensor " + name + " has shape " + shape_str(loaded.shape()) +
                      ", expected " + shape_str(t->shape()));
    }
    *t = loaded;
  }
  if (!w.all_finite()) throw NumericError("checkpoint: non-finite weights in " + dir);
  return w;
}

// ---- stages -------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  auto samples = generate_shapes(cfg.dataset);
  save_dataset((fs::path(cfg.out_dir) / "dataset").string(), samples, cfg.dataset);
  json meta;
  meta["seed"] = cfg.seed;
  meta["eval_count"] = cfg.eval_count;
  meta["phi"] = cfg.effective_phi();
  meta["cka_m"] = cfg.cka_m;
  json tags = json::array();
  for (const std::string& t : attack_tags(cfg)) tags.push_back(t);
  meta["attack_tags"] = tags;
  write_json(fs::path(cfg.out_dir) / "run_meta.json", meta);
  std::cerr << "gen-data: " << samples.size() << " samples\n";
}

void cmd_train(const RunConfig& cfg) {
  auto samples = load_dataset((fs::path(cfg.out_dir) / "dataset").string());
  TrainParams params = cfg.train;
  params.seed = cfg.seed;
  params.eval_threads = cfg.effective_threads();
  TrainResult result = train_toy(samples, cfg.vit_config(), params);

  std::ostringstream log;
  log << "epoch,mean_loss,train_accuracy\n";
  for (const TrainLogRow& row : result.log) {
    log << row.epoch << "," << fmt(row.mean_loss) << "," << fmt(row.train_accuracy) << "\n";
  }
  const fs::path ckpt = fs::path(cfg.out_dir) / "checkpoint";
  fs::create_directories(ckpt);
  write_text(ckpt / "train_log.csv", log.str());
  save_checkpoint(ckpt.string(), result.weights);

  if (!result.failure.empty()) throw NumericError("train: " + result.failure);
  if (!result.reached_target) {
    throw NumericError("train: accuracy target " + fmt(params.target_accuracy) + " not reached after " +
                       std::to_string(params.epochs) + " epochs (last " +
                       (result.log.empty() ? std::string("n/a") : fmt(result.log.back().train_accuracy)) + ")");
  }
  std::cerr << "train: reached " << result.log.back().train_accuracy << " after "
            << result.log.size() << " epochs\n";
}

void cmd_build_reference(const RunConfig& cfg) {
  const ViTWeights weights = load_checkpoint((fs::path(cfg.out_dir) / "checkpoint").string());
  EvalSet ev = load_eval_set(cfg);
  const PatchGrid grid = PatchGrid::regular(weights.config.image_side, weights.config.patch_side);
  const int phi = cfg.effective_phi();

  std::vector<InferenceTrace> traces(ev.samples.size());
  std::vector<std::vector<std::vector<double>>> profiles(ev.samples.size());
  std::vector<double> fr(ev.samples.size()), ph(ev.samples.size());
  parallel_for(ev.samples.size(), cfg.effective_threads(), [&](std::size_t i) {
    traces[i] = vit_forward(weights, ev.samples[i].image);
    profiles[i] = attention_profile(traces[i], grid);
    fr[i] = frequency_ratio(ev.samples[i].image, phi);
    ph[i] = posterior_entropy(traces[i].posterior);
  });

  // Mean attention profile over the clean set.
  const int depth = weights.config.depth, heads = weights.config.heads;
  std::vector<std::vector<double>> mean_ad(static_cast<std::size_t>(depth),
                                           std::vector<double>(static_cast<std::size_t>(heads), 0.0));
  for (const auto& p : profiles) {
    for (int b = 0; b < depth; ++b) {
      for (int h = 0; h < heads; ++h) mean_ad[b][h] += p[b][h];
    }
  }
  for (auto& row : mean_ad) {
    for (double& v : row) v /= static_cast<double>(profiles.size());
  }

  std::vector<double> s_ap(ev.samples.size());
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    s_ap[i] = attention_profile_summary(profiles[i], mean_ad);
  }

  // Reference CKA over the entire clean evaluation set.
  std::vector<const InferenceTrace*> всеtraces;
  for (const auto& t : traces) всеtraces.push_back(&t);
  const CkaMatrix m_ref = cka_matrix(collect_latents(всеtraces));

  // Per-batch clean S_CKA for the reference histograms.
  const auto batches = cka_batches(cfg, ev.samples.size());
  std::vector<double> s_cka;
  for (const auto& batch : batches) {
    std::vector<const InferenceTrace*> members;
    for (std::size_t ix : batch) members.push_back(&traces[ix]);
    s_cka.push_back(cka_difference(m_ref, {cka_matrix(collect_latents(members))}).s_cka);
  }

  const fs::path ref = fs::path(cfg.out_dir) / "reference";
  fs::create_directories(ref);
  Tensor mean_ad_t(Shape{depth, heads});
  for (int b = 0; b < depth; ++b) {
    for (int h = 0; h < heads; ++h) mean_ad_t.data()[static_cast<std::size_t>(b) * heads + h] = mean_ad[b][h];
  }
  vtf::save((ref / "mean_ad.vtf").string(), mean_ad_t);
  Tensor m_ref_t(Shape{m_ref.layers, m_ref.layers}, m_ref.values);
  vtf::save((ref / "m_ref.vtf").string(), m_ref_t);
  Tensor m_ref_def(Shape{m_ref.layers, m_ref.layers});
  for (std::size_t i = 0; i < m_ref.defined.size(); ++i) m_ref_def.data()[i] = m_ref.defined[i];
  vtf::save((ref / "m_ref_defined.vtf").string(), m_ref_def);

  json meta;
  meta["clean_count"] = ev.samples.size();
  meta["phi"] = phi;
  meta["cka_m"] = cfg.cka_m;
  meta["tap_names"] = tap_names(depth);
  json blist = json::array();
  for (const auto& batch : batches) {
    json b = json::array();
    for (std::size_t ix : batch) b.push_back(ev.samples[ix].id);
    blist.push_back(b);
  }
  meta["batches"] = blist;
  write_json(ref / "meta.json", meta);

  // Clean histograms per signature, 100 bins over the clean range.
  auto write_hist = [&](const std::string& name, const std::vector<double>& values) {
    const auto edges = shared_edges(values, values, cfg.histogram_bins);
    const Histogram h = histogram(values, edges);
    std::ostringstream csv;
    csv << "bin_left,bin_right,density\n";
    for (std::size_t i = 0; i < h.density.size(); ++i) {
      csv << fmt(h.edges[i]) << "," << fmt(h.edges[i + 1]) << "," << fmt(h.density[i]) << "\n";
    }
    write_text(ref / ("clean_hist_" + name + ".csv"), csv.str());
  };
  write_hist("fr", fr);
  write_hist("ph", ph);
  write_hist("s_ap", s_ap);
  write_hist("s_cka", s_cka);
  std::cerr << "build-reference: " << ev.samples.size() << " clean samples, " << batches.size()
            << " CKA batches\n";
}

void cmd_attack(const RunConfig& cfg) {
  const ViTWeights weights = load_checkpoint((fs::path(cfg.out_dir) / "checkpoint").string());
  EvalSet ev = load_eval_set(cfg);
  const fs::path root = fs::path(cfg.out_dir) / "attacks";
  fs::create_directories(root);

  json failures = json::array();
  for (const AttackSpec& spec : cfg.attacks) {
    const std::string tag = spec.tag();
    try {
      const fs::path dir = root / tag;
      fs::create_directories(dir);
      std::vector<AttackResult> results(ev.samples.size());
      parallel_for(ev.samples.size(), cfg.effective_threads(), [&](std::size_t i) {
        results[i] = run_attack(weights, spec, ev.samples[i].image, ev.samples[i].label);
      });
      std::ostringstream manifest;
      manifest << "source,label,family,epsilon,alpha,iters,c,kappa,steps,lr,success,linf,l2\n";
      for (std::size_t i = 0; i < results.size(); ++i) {
        const std::string file = ev.samples[i].id + ".vtf";
        vtf::save((dir / file).string(), results[i].image);
        manifest << file << "," << ev.samples[i].label << "," << family_name(spec.family) << ","
                 << fmt(spec.epsilon) << "," << fmt(spec.alpha) << "," << spec.iters << ","
                 << fmt(spec.c) << "," << fmt(spec.kappa) << "," << spec.cw_steps << ","
                 << fmt(spec.cw_lr) << "," << (results[i].success ? 1 : 0) << ","
                 << fmt(results[i].linf) << "," << fmt(results[i].l2) << "\n";
      }
      write_text(dir / "manifest.csv", manifest.str());
      std::cerr << "attack " << tag << ": done\n";
    } catch (const std::exception& e) {
      std::cerr << "attack " << tag << ": FAILED: " << e.what() << "\n";
      failures.push_back({{"tag", tag}, {"error", e.what()}});
      std::error_code ec;
      fs::remove_all(root / tag, ec);  // no partial sets downstream
    }
  }
  write_json(root / "failures.json", failures);
}

void cmd_extract(const RunConfig& cfg) {
  const ViTWeights weights = load_checkpoint((fs::path(cfg.out_dir) / "checkpoint").string());
  EvalSet ev = load_eval_set(cfg);
  const fs::path ref = fs::path(cfg.out_dir) / "reference";
  const fs::path sig = fs::path(cfg.out_dir) / "signatures";
  fs::create_directories(sig);

  Tensor mean_ad_t = vtf::load((ref / "mean_ad.vtf").string());
  const int depth = mean_ad_t.dim(0), heads = mean_ad_t.dim(1);
  std::vector<std::vector<double>> ref_profile(static_cast<std::size_t>(depth));
  for (int b = 0; b < depth; ++b) {
    ref_profile[b].assign(mean_ad_t.data() + static_cast<std::size_t>(b) * heads,
                          mean_ad_t.data() + static_cast<std::size_t>(b + 1) * heads);
  }
  Tensor m_ref_t = vtf::load((ref / "m_ref.vtf").string());
  Tensor m_ref_def = vtf::load((ref / "m_ref_defined.vtf").string());
  CkaMatrix m_ref;
  m_ref.layers = m_ref_t.dim(0);
  m_ref.batch = 0;
  m_ref.values = m_ref_t.values();
  m_ref.defined.resize(m_ref_def.size());
  for (std::size_t i = 0; i < m_ref_def.size(); ++i) {
    m_ref.defined[i] = m_ref_def.data()[i] != 0.0 ? 1 : 0;
  }

  const auto batches = cka_batches(cfg, ev.samples.size());

  // Clean set first, then each attacked set that produced a manifest.
  {
    SetSignatures s = extract_set(cfg, weights, ev.samples, ref_profile, m_ref, batches);
    write_signatures(sig, "clean", s, depth, heads);
    std::vector<std::string> ids;
    for (const auto& smp : ev.samples) ids.push_back(smp.id);
    write_cka(sig, "clean", s, batches, ids, depth, cfg.cka_m);
    std::cerr << "extract clean: done\n";
  }

  json failures = json::array();
  for (const std::string& tag : attack_tags(cfg)) {
    const fs::path adir = fs::path(cfg.out_dir) / "attacks" / tag;
    if (!fs::exists(adir / "manifest.csv")) {
      std::cerr << "extract " << tag << ": skipped (no attacked set)\n";
      continue;
    }
    try {
      auto manifest = read_csv(adir / "manifest.csv");
      std::vector<LabeledImage> attacked;
      for (std::size_t r = 1; r < manifest.size(); ++r) {
        LabeledImage s;
        const std::string& file = manifest[r][0];
        s.image = vtf::load((adir / file).string());
        s.label = to_int(manifest[r][1], "label");
        s.id = file.substr(0, file.rfind('.'));
        attacked.push_back(std::move(s));
      }
      if (attacked.size() != ev.samples.size()) {
        throw DataError("attacked set " + tag + " has " + std::to_string(attacked.size()) +
                        " samples, expected " + std::to_string(ev.samples.size()));
      }
      for (std::size_t i = 0; i < attacked.size(); ++i) {
        if (attacked[i].id != ev.samples[i].id) {
          throw DataError("attacked set " + tag + " misaligned at " + attacked[i].id);
        }
      }
      SetSignatures s = extract_set(cfg, weights, attacked, ref_profile, m_ref, batches);
      write_signatures(sig, tag, s, depth, heads);
      std::vector<std::string> ids;
      for (const auto& smp : attacked) ids.push_back(smp.id);
      write_cka(sig, tag, s, batches, ids, depth, cfg.cka_m);
      std::cerr << "extract " << tag << ": done\n";
    } catch (const std::exception& e) {
      std::cerr << "extract " << tag << ": FAILED: " << e.what() << "\n";
      failures.push_back({{"tag", tag}, {"error", e.what()}});
    }
  }
  write_json(sig / "failures.json", failures);
}

void cmd_compare(const RunConfig& cfg) {
  const fs::path sig = fs::path(cfg.out_dir) / "signatures";
  const fs::path cmp = fs::path(cfg.out_dir) / "compare";
  fs::create_directories(cmp);

  const SignatureTable clean = read_signatures(sig / "clean.csv");
  const json clean_cka = read_json(sig / "cka_clean.json");
  const std::vector<double> clean_scka = clean_cka.at("s_cka_per_batch").get<std::vector<double>>();

  Tensor m_ref_t = vtf::load((fs::path(cfg.out_dir) / "reference" / "m_ref.vtf").string());
  Tensor m_ref_def = vtf::load((fs::path(cfg.out_dir) / "reference" / "m_ref_defined.vtf").string());
  const int layers = m_ref_t.dim(0);
  const auto taps = tap_names(clean.depth * 0 + layers / 3);

  auto load_batch_entries = [&](const std::string& tag) {
    Tensor stack = vtf::load((sig / ("cka_" + tag + ".vtf")).string());
    Tensor defined = vtf::load((sig / ("cka_" + tag + "_defined.vtf")).string());
    return std::make_pair(stack, defined);
  };
  auto [clean_stack, clean_defined] = load_batch_entries("clean");

  auto write_hist_pair = [&](const std::string& name, const std::string& tag,
                             const std::vector<double>& cv, const std::vector<double>& av) {
    const auto edges = shared_edges(cv, av, cfg.histogram_bins);
    const Histogram hc = histogram(cv, edges);
    const Histogram ha = histogram(av, edges);
    std::ostringstream csv;
    csv << "bin_left,bin_right,clean_density,attacked_density\n";
    for (std::size_t i = 0; i < hc.density.size(); ++i) {
      csv << fmt(hc.edges[i]) << "," << fmt(hc.edges[i + 1]) << "," << fmt(hc.density[i]) << ","
          << fmt(ha.density[i]) << "\n";
    }
    write_text(cmp / ("hist_" + name + "__" + tag + ".csv"), csv.str());
    return bhattacharyya(hc, ha);
  };

  auto report_to_json = [](const SeparabilityReport& r) {
    json j;
    j["signature"] = r.signature;
    j["attack_tag"] = r.attack_tag;
    j["mode"] = r.mode;
    j["summary_bc"] = r.summary_bc;
    j["refined_bc"] = r.refined_bc;
    j["improvement"] = r.improvement;
    j["best_unit"] = r.best_unit;
    json units;
    for (const auto& [name, bc] : r.unit_bcs) units[name] = bc;
    j["unit_bcs"] = units;
    return j;
  };

  // Per-batch |ref_ij - M(B)_ij| unit values for one layer pair.
  auto dij_units = [&](const Tensor& stack, const Tensor& defined) {
    std::vector<UnitValues> units;  // filled by caller pairing clean/attacked
    (void)stack;
    (void)defined;
    return units;
  };
  (void)dij_units;

  json failures = json::array();
  for (const std::string& tag : attack_tags(cfg)) {
    if (!fs::exists(sig / (tag + ".csv"))) {
      std::cerr << "compare " << tag << ": skipped (no signatures)\n";
      continue;
    }
    try {
      const SignatureTable att = read_signatures(sig / (tag + ".csv"));
      const json att_cka = read_json(sig / ("cka_" + tag + ".json"));
      const std::vector<double> att_scka = att_cka.at("s_cka_per_batch").get<std::vector<double>>();

      json bundle;
      // FR and PH: summary only.
      {
        const double bc = write_hist_pair("fr", tag, clean.fr, att.fr);
        SeparabilityReport r;
        r.signature = "fr";
        r.attack_tag = tag;
        r.mode = cfg.refine_mode;
        r.summary_bc = bc;
        r.refined_bc = bc;
        r.best_unit = "none";
        bundle["fr"] = report_to_json(r);
      }
      {
        const double bc = write_hist_pair("ph", tag, clean.ph, att.ph);
        SeparabilityReport r;
        r.signature = "ph";
        r.attack_tag = tag;
        r.mode = cfg.refine_mode;
        r.summary_bc = bc;
        r.refined_bc = bc;
        r.best_unit = "none";
        bundle["ph"] = report_to_json(r);
      }
      // S_AP with per-head refinement.
      {
        const double bc = write_hist_pair("s_ap", tag, clean.s_ap, att.s_ap);
        std::vector<UnitValues> units;
        for (int b = 0; b < clean.depth; ++b) {
          for (int h = 0; h < clean.heads; ++h) {
            const std::size_t u = static_cast<std::size_t>(b) * clean.heads + h;
            units.push_back({"b" + std::to_string(b) + "h" + std::to_string(h), clean.ad[u], att.ad[u]});
          }
        }
        bundle["s_ap"] = report_to_json(
            refine_best_unit("s_ap", tag, bc, units, cfg.refine_mode, cfg.histogram_bins));
      }
      // S_CKA with per-layer-pair refinement over per-batch D contributions.
      {
        const double bc = write_hist_pair("s_cka", tag, clean_scka, att_scka);
        auto [att_stack, att_defined] = load_batch_entries(tag);
        const std::size_t nb_c = static_cast<std::size_t>(clean_stack.dim(0));
        const std::size_t nb_a = static_cast<std::size_t>(att_stack.dim(0));
        std::vector<UnitValues> units;
        for (int i = 0; i < layers; ++i) {
          for (int j = i; j < layers; ++j) {
            const std::size_t e = static_cast<std::size_t>(i) * layers + j;
            if (m_ref_def.data()[e] == 0.0) continue;
            const double ref = m_ref_t.data()[e];
            UnitValues u;
            u.name = taps[static_cast<std::size_t>(i)] + "|" + taps[static_cast<std::size_t>(j)];
            for (std::size_t b = 0; b < nb_c; ++b) {
              const std::size_t ix = b * layers * layers + e;
              if (clean_defined.data()[ix] != 0.0) u.clean.push_back(std::abs(ref - clean_stack.data()[ix]));
            }
            for (std::size_t b = 0; b < nb_a; ++b) {
              const std::size_t ix = b * layers * layers + e;
              if (att_defined.data()[ix] != 0.0) u.attacked.push_back(std::abs(ref - att_stack.data()[ix]));
            }
            if (!u.clean.empty() && !u.attacked.empty()) units.push_back(std::move(u));
          }
        }
        bundle["s_cka"] = report_to_json(
            refine_best_unit("s_cka", tag, bc, units, cfg.refine_mode, cfg.histogram_bins));
      }
      for (const auto& [name, j] : bundle.items()) {
        write_json(cmp / (name + "__" + tag + ".json"), j);
      }
      std::cerr << "compare " << tag << ": done\n";
    } catch (const std::exception& e) {
      std::cerr << "compare " << tag << ": FAILED: " << e.what() << "\n";
      failures.push_back({{"tag", tag}, {"error", e.what()}});
    }
  }
  write_json(cmp / "failures.json", failures);
}

void cmd_report(const RunConfig& cfg) {
  const fs::path sig = fs::path(cfg.out_dir) / "signatures";
  const fs::path cmp = fs::path(cfg.out_dir) / "compare";
  const fs::path rep = fs::path(cfg.out_dir) / "report";
  fs::create_directories(rep);

  // Accuracy from the persisted posteriors; the stored argmax must agree
  // with one recomputed here.
  auto accuracy_of = [&](const std::string& tag) {
    auto rows = read_csv(sig / (tag + "_posteriors.csv"));
    std::size_t correct = 0;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      const int label = to_int(row[2], "label");
      const int stored_pred = to_int(row[3], "predicted");
      int arg = 0;
      double best = -1.0;
      for (std::size_t c = 4; c < row.size(); ++c) {
        const double p = to_double(row[c], "p");
        if (p > best) {
          best = p;
          arg = static_cast<int>(c - 4);
        }
      }
      if (arg != stored_pred) {
        throw NumericError("report: stored prediction disagrees with posteriors for " + row[0] +
                           " in " + tag);
      }
      if (arg == label) ++correct;
    }
    return std::make_pair(static_cast<double>(correct) / static_cast<double>(rows.size() - 1),
                          rows.size() - 1);
  };

  json summary;
  summary["seed"] = cfg.seed;
  const auto [clean_acc, clean_n] = accuracy_of("clean");
  summary["clean"] = {{"accuracy", clean_acc}, {"n", clean_n}};

  std::ostringstream acc_csv;
  acc_csv << "attack_tag,n,top1_accuracy,success_rate,mean_linf,mean_l2\n";
  acc_csv << "clean," << clean_n << "," << fmt(clean_acc) << ",,,\n";

  json attacks_j;
  json bc_j;
  json refined_j;
  json failed = json::array();
  for (const std::string& tag : attack_tags(cfg)) {
    const fs::path adir = fs::path(cfg.out_dir) / "attacks" / tag;
    if (!fs::exists(sig / (tag + "_posteriors.csv")) || !fs::exists(adir / "manifest.csv")) {
      failed.push_back(tag);
      continue;
    }
    const auto [acc, n] = accuracy_of(tag);
    auto manifest = read_csv(adir / "manifest.csv");
    double succ = 0.0, linf = 0.0, l2 = 0.0;
    for (std::size_t r = 1; r < manifest.size(); ++r) {
      succ += to_double(manifest[r][10], "success");
      linf = std::max(linf, to_double(manifest[r][11], "linf"));
      l2 += to_double(manifest[r][12], "l2");
    }
    const double rows_n = static_cast<double>(manifest.size() - 1);
    succ /= rows_n;
    l2 /= rows_n;
    acc_csv << tag << "," << n << "," << fmt(acc) << "," << fmt(succ) << "," << fmt(linf) << ","
            << fmt(l2) << "\n";
    attacks_j[tag] = {{"accuracy", acc}, {"n", n},     {"success_rate", succ},
                      {"max_linf", linf}, {"mean_l2", l2}};

    json per_sig;
    json per_ref;
    for (const std::string& s : {"fr", "ph", "s_ap", "s_cka"}) {
      const fs::path f = cmp / (s + "__" + tag + ".json");
      if (!fs::exists(f)) continue;
      const json r = read_json(f);
      per_sig[s] = r.at("summary_bc");
      if (s == "s_ap" || s == "s_cka") {
        per_ref[s] = {{"refined_bc", r.at("refined_bc")},
                      {"improvement", r.at("improvement")},
                      {"best_unit", r.at("best_unit")}};
      }
    }
    if (!per_sig.empty()) bc_j[tag] = per_sig;
    if (!per_ref.empty()) refined_j[tag] = per_ref;
  }

  write_text(rep / "accuracy.csv", acc_csv.str());
  summary["attacks"] = attacks_j;
  if (!bc_j.empty()) summary["bc"] = bc_j;
  if (!refined_j.empty()) summary["refined"] = refined_j;
  summary["failed_tags"] = failed;
  write_json(rep / "summary.json", summary);
  std::cerr << "report: written\n";
}

void run_grid(const RunConfig& cfg) {
  cmd_attack(cfg);
  cmd_extract(cfg);
  cmd_compare(cfg);
  cmd_report(cfg);
}

void run_all(const RunConfig& cfg) {
  cmd_gen_data(cfg);
  cmd_train(cfg);
  cmd_build_reference(cfg);
  run_grid(cfg);
}

}  // namespace vitsig
