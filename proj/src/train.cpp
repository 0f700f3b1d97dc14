#include "midalign/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "midalign/objectives.hpp"

namespace midalign::train {

namespace {

/// Decoupled weight decay Adam over a flat list of arrays.
class AdamW {
 public:
  AdamW(std::vector<Matrix<float>*> params, double beta1, double beta2, double eps,
        double weight_decay)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (auto* p : params_) {
      m_.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<Matrix<float>*>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const auto step_size = static_cast<float>(lr / c1);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    const auto eps = static_cast<float>(eps_);
    const auto decay = static_cast<float>(1.0 - lr * weight_decay_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      const auto& g = *grads[i];
      m_[i] = b1 * m_[i] + (1.0f - b1) * g;
      v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseAbs2();
      if (weight_decay_ != 0.0) p *= decay;
      p.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  std::vector<Matrix<float>*> params_;
  std::vector<Matrix<float>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
};

std::vector<Matrix<float>*> adapter_arrays(AdapterSet<float>& set) {
  std::vector<Matrix<float>*> out;
  for (auto& [_, f] : set.entries) {
    out.push_back(&f.a);
    out.push_back(&f.b);
  }
  return out;
}

std::vector<Matrix<float>*> base_arrays(BaseWeights<float>& w) {
  std::vector<Matrix<float>*> out;
  w.for_each([&out](const std::string&, Matrix<float>& m) { out.push_back(&m); });
  return out;
}

void zero(const std::vector<Matrix<float>*>& arrays) {
  for (auto* m : arrays) m->setZero();
}

/// Sum over `layers` of the contrastive loss between pooled source and target
/// rows of a packed [sources..., targets...] forward pass.
template <typename Scalar>
ad::Var<Scalar> batch_alignment_loss(const ForwardResult<Scalar>& fwd, const corpus::AlignmentBatch& batch,
                                     const PackedBatch& packed, const std::set<int>& layers,
                                     Scalar tau, bool symmetric) {
  const std::size_t n = batch.size();
  std::vector<std::vector<Eigen::Index>> src_rows(n), tgt_rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = packed.segments[i];
    const auto& t = packed.segments[n + i];
    for (Eigen::Index p = 0; p < s.length; ++p) {
      if (!batch.source_pad_masks[i][static_cast<std::size_t>(p)]) src_rows[i].push_back(s.offset + p);
    }
    for (Eigen::Index p = 0; p < t.length; ++p) {
      if (!batch.target_pad_masks[i][static_cast<std::size_t>(p)]) tgt_rows[i].push_back(t.offset + p);
    }
  }
  std::optional<ad::Var<Scalar>> total;
  for (int layer : layers) {
    const auto& h = fwd.hidden[static_cast<std::size_t>(layer)];
    auto loss = objectives::alignment_loss(ad::mean_rows(h, src_rows), ad::mean_rows(h, tgt_rows), tau, symmetric);
    total = total ? ad::add(*total, loss) : loss;
  }
  return *total;
}

PackedBatch pack_alignment(const corpus::AlignmentBatch& batch, const ModelConfig& config) {
  std::vector<std::vector<TokenId>> seqs = batch.source_tokens;
  seqs.insert(seqs.end(), batch.target_tokens.begin(), batch.target_tokens.end());
  return pack_sequences(seqs, config);
}

}  // namespace

void TrainConfig::validate(int num_layers) const {
  if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ConfigError("train: warmup_ratio must lie in [0, 1]");
  if (micro_batch < 1 || effective_batch < 1) throw ConfigError("train: batch sizes must be positive");
  if (effective_batch % micro_batch != 0) {
    throw ConfigError("train: effective_batch " + std::to_string(effective_batch) +
                      " is not divisible by micro_batch " + std::to_string(micro_batch));
  }
  if (contrastive_batch < 1 || effective_batch % contrastive_batch != 0) {
    throw ConfigError("train: effective_batch must be a multiple of contrastive_batch");
  }
  if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
  for (int l : align_layers) {
    if (l < 1 || l > num_layers) {
      throw ConfigError("train: align layer " + std::to_string(l) + " outside 1.." + std::to_string(num_layers));
    }
  }
  if (max_epochs < 1 || eval_every < 1 || patience < 1) {
    throw ConfigError("train: max_epochs, eval_every and patience must be positive");
  }
  if (task_steps < 1 || align_steps < 1) throw ConfigError("train: alternation ratio entries must be positive");
  if (max_steps < 0) throw ConfigError("train: max_steps must be non-negative");
}

std::set<int> TrainConfig::resolved_align_layers(int num_layers) const {
  if (!align_layers.empty()) return align_layers;
  return {num_layers / 2};
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"peak_lr", c.peak_lr},
       {"warmup_ratio", c.warmup_ratio},
       {"effective_batch", c.effective_batch},
       {"micro_batch", c.micro_batch},
       {"contrastive_batch", c.contrastive_batch},
       {"tau", c.tau},
       {"align_layers", c.align_layers},
       {"max_epochs", c.max_epochs},
       {"eval_every", c.eval_every},
       {"patience", c.patience},
       {"alternation_ratio", {c.task_steps, c.align_steps}},
       {"symmetric_alignment", c.symmetric_alignment},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"max_steps", c.max_steps},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known = {
      "peak_lr",    "warmup_ratio", "effective_batch",   "micro_batch",         "contrastive_batch",
      "tau",        "align_layers", "max_epochs",        "eval_every",          "patience",
      "alternation_ratio", "symmetric_alignment", "weight_decay", "beta1", "beta2", "adam_eps",
      "max_steps",  "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("train: unknown key '" + key + "'");
  }
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.effective_batch = j.value("effective_batch", c.effective_batch);
  c.micro_batch = j.value("micro_batch", c.micro_batch);
  c.contrastive_batch = j.value("contrastive_batch", c.contrastive_batch);
  c.tau = j.value("tau", c.tau);
  if (j.contains("align_layers")) c.align_layers = j.at("align_layers").get<std::set<int>>();
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.patience = j.value("patience", c.patience);
  if (j.contains("alternation_ratio")) {
    const auto r = j.at("alternation_ratio").get<std::vector<int>>();
    if (r.size() != 2) throw ConfigError("train: alternation_ratio must be [task_steps, align_steps]");
    c.task_steps = r[0];
    c.align_steps = r[1];
  }
  c.symmetric_alignment = j.value("symmetric_alignment", c.symmetric_alignment);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
}

const char* to_string(Objective o) { return o == Objective::kTask ? "task" : "align"; }

std::string TrainLog::to_jsonl() const {
  std::ostringstream out;
  for (const auto& s : steps) {
    nlohmann::json j = {{"type", "step"}, {"step", s.step}, {"objective", to_string(s.objective)},
                        {"loss", s.loss}, {"lr", s.lr}};
    out << j.dump() << '\n';
  }
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const auto& e = evals[i];
    nlohmann::json j = {{"type", "eval"}, {"step", e.step}, {"checkpoint_id", e.checkpoint_id}};
    j["dev_task_loss"] = e.dev_task_loss ? nlohmann::json(*e.dev_task_loss) : nlohmann::json(nullptr);
    j["dev_align_loss"] = e.dev_align_loss ? nlohmann::json(*e.dev_align_loss) : nlohmann::json(nullptr);
    j["best"] = static_cast<int>(i) == best_checkpoint;
    out << j.dump() << '\n';
  }
  nlohmann::json summary = {{"type", "summary"},
                            {"planned_steps", planned_steps},
                            {"steps_run", steps.size()},
                            {"best_checkpoint", best_checkpoint},
                            {"stopped_early", stopped_early}};
  out << summary.dump() << '\n';
  return out.str();
}

double evaluate_task_loss(const Transformer<float>& model, const AdapterSet<float>* adapters,
                          const std::vector<corpus::TaskExample>& examples, int batch_size) {
  if (examples.empty()) throw InputError("evaluate_task_loss: no examples");
  double total = 0.0;
  for (std::size_t start = 0; start < examples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(examples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::vector<TokenId>> seqs;
    std::vector<const corpus::TaskExample*> ptrs;
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(examples[i].sequence());
      ptrs.push_back(&examples[i]);
    }
    const auto packed = pack_sequences(seqs, model.config());
    ad::Tape<float> tape;
    const auto base = bind(tape, model.weights());
    std::optional<BoundAdapters<float>> bound;
    if (adapters) bound = bind(tape, *adapters);
    const auto fwd = forward(model.config(), base, bound ? &*bound : nullptr, packed, ForwardOptions{});
    const auto loss = objectives::task_loss<float>(*fwd.logits, ptrs, packed.segments);
    total += static_cast<double>(loss.item()) * static_cast<double>(end - start);
  }
  return total / static_cast<double>(examples.size());
}

double evaluate_alignment_loss(const Transformer<float>& model, const AdapterSet<float>* adapters,
                               const std::vector<corpus::SentencePair>& pairs,
                               const TrainConfig& config, int num_layers) {
  const auto layers = config.resolved_align_layers(num_layers);
  const auto schedule =
      corpus::build_alignment_schedule(pairs, static_cast<std::size_t>(config.contrastive_batch), 0);
  if (schedule.empty()) throw InputError("evaluate_alignment_loss: no mini-batches");
  double total = 0.0;
  for (const auto& batch : schedule) {
    const auto packed = pack_alignment(batch, model.config());
    ad::Tape<float> tape;
    const auto base = bind(tape, model.weights());
    std::optional<BoundAdapters<float>> bound;
    if (adapters) bound = bind(tape, *adapters);
    ForwardOptions options;
    options.last_layer = *layers.rbegin();
    const auto fwd = forward(model.config(), base, bound ? &*bound : nullptr, packed, options);
    total += batch_alignment_loss<float>(fwd, batch, packed, layers, static_cast<float>(config.tau),
                                         config.symmetric_alignment)
                 .item();
  }
  return total / static_cast<double>(schedule.size());
}

TrainResult train(const Transformer<float>& model, AdapterSet<float> adapters,
                  const TrainData& data, const TrainConfig& config, const TrainHooks& hooks) {
  const auto& mc = model.config();
  config.validate(mc.num_layers);
  adapters.check_compatible(mc);
  const bool has_task = !data.task.empty();
  const bool has_align = !data.align.empty();
  if (!has_task && !has_align) throw ConfigError("train: both task and alignment data are empty");
  const auto layers = config.resolved_align_layers(mc.num_layers);

  std::mt19937_64 rng(config.seed);
  auto grads = AdapterSet<float>::zeros_like(adapters);
  const auto param_list = adapter_arrays(adapters);
  const auto grad_list = adapter_arrays(grads);
  AdamW optimizer(param_list, config.beta1, config.beta2, config.adam_eps, config.weight_decay);

  const auto eff = static_cast<std::size_t>(config.effective_batch);
  const auto minibatches_per_step = static_cast<std::size_t>(config.effective_batch / config.contrastive_batch);

  // Alignment schedule, rebuilt with a fresh seed every time it runs out.
  std::vector<corpus::AlignmentBatch> schedule;
  std::size_t schedule_cursor = 0;
  std::uint64_t schedule_cycle = 0;
  auto next_alignment_batch = [&]() -> const corpus::AlignmentBatch& {
    if (schedule_cursor >= schedule.size()) {
      schedule = corpus::build_alignment_schedule(data.align, static_cast<std::size_t>(config.contrastive_batch),
                                                  config.seed * 1000003ULL + schedule_cycle++);
      schedule_cursor = 0;
      if (schedule.empty()) throw ConfigError("train: alignment data yields no contrastive mini-batch");
    }
    return schedule[schedule_cursor++];
  };

  // Task epochs over a seeded shuffle.
  std::vector<std::size_t> task_order(data.task.size());
  std::iota(task_order.begin(), task_order.end(), std::size_t{0});
  std::size_t task_cursor = task_order.size();
  auto next_task_batch = [&]() {
    if (task_cursor >= task_order.size()) {
      for (std::size_t i = task_order.size(); i > 1; --i) std::swap(task_order[i - 1], task_order[rng() % i]);
      task_cursor = 0;
    }
    const std::size_t end = std::min(task_order.size(), task_cursor + eff);
    std::vector<const corpus::TaskExample*> batch;
    for (std::size_t i = task_cursor; i < end; ++i) batch.push_back(&data.task[task_order[i]]);
    task_cursor = end;
    return batch;
  };

  long total_steps = 0;
  if (has_task) {
    const long per_epoch = static_cast<long>((data.task.size() + eff - 1) / eff);
    const long task_total = per_epoch * config.max_epochs;
    const long align_total = has_align ? (task_total * config.align_steps + config.task_steps - 1) / config.task_steps : 0;
    total_steps = task_total + align_total;
  } else {
    const auto probe = corpus::build_alignment_schedule(data.align, static_cast<std::size_t>(config.contrastive_batch), config.seed);
    const long per_epoch = static_cast<long>((probe.size() + minibatches_per_step - 1) / minibatches_per_step);
    total_steps = std::max(1L, per_epoch) * config.max_epochs;
  }
  if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);
  const double warmup = config.warmup_ratio * static_cast<double>(total_steps);

  TrainResult result{adapters, {}};
  result.log.planned_steps = total_steps;
  std::optional<double> best;
  int since_best = 0;
  const int cycle = config.task_steps + config.align_steps;

  for (long step = 1; step <= total_steps; ++step) {
    Objective objective;
    if (!has_align) {
      objective = Objective::kTask;
    } else if (!has_task) {
      objective = Objective::kAlign;
    } else {
      objective = ((step - 1) % cycle) < config.task_steps ? Objective::kTask : Objective::kAlign;
    }
    const double lr = objectives::lr_at(step, config.peak_lr, warmup);
    zero(grad_list);
    double step_loss = 0.0;

    if (objective == Objective::kTask) {
      const auto batch = next_task_batch();
      const auto weight = 1.0f / static_cast<float>(batch.size());
      for (std::size_t start = 0; start < batch.size(); start += static_cast<std::size_t>(config.micro_batch)) {
        const std::size_t end = std::min(batch.size(), start + static_cast<std::size_t>(config.micro_batch));
        std::vector<std::vector<TokenId>> seqs;
        std::vector<const corpus::TaskExample*> micro(batch.begin() + static_cast<std::ptrdiff_t>(start),
                                                      batch.begin() + static_cast<std::ptrdiff_t>(end));
        for (const auto* ex : micro) seqs.push_back(ex->sequence());
        const auto packed = pack_sequences(seqs, mc);
        ad::Tape<float> tape;
        const auto base = bind(tape, model.weights());
        const auto bound = bind(tape, adapters, &grads);
        ForwardOptions options{Mode::kTrain, &rng, -1, true};
        const auto fwd = forward(mc, base, &bound, packed, options);
        // task_loss averages over the micro-batch; rescale to the effective batch.
        const auto loss = ad::scale(objectives::task_loss<float>(*fwd.logits, micro, packed.segments),
                                    weight * static_cast<float>(micro.size()));
        tape.backward(loss);
        step_loss += loss.item();
      }
    } else {
      const auto weight = 1.0f / static_cast<float>(minibatches_per_step);
      for (std::size_t k = 0; k < minibatches_per_step; ++k) {
        const auto& batch = next_alignment_batch();
        const auto packed = pack_alignment(batch, mc);
        ad::Tape<float> tape;
        const auto base = bind(tape, model.weights());
        const auto bound = bind(tape, adapters, &grads);
        ForwardOptions options{Mode::kTrain, &rng, *layers.rbegin(), false};
        const auto fwd = forward(mc, base, &bound, packed, options);
        const auto loss = ad::scale(batch_alignment_loss<float>(fwd, batch, packed, layers,
                                                                static_cast<float>(config.tau),
                                                                config.symmetric_alignment),
                                    weight);
        tape.backward(loss);
        step_loss += loss.item();
      }
    }
    optimizer.step(grad_list, lr);
    result.log.steps.push_back({step, objective, step_loss, lr});
    if (hooks.on_step) hooks.on_step(result.log.steps.back());

    if (step % config.eval_every != 0 && step != total_steps) continue;
    EvalRecord rec;
    rec.step = step;
    rec.checkpoint_id = static_cast<int>(result.log.evals.size()) + 1;
    if (hooks.dev_task_loss) {
      rec.dev_task_loss = hooks.dev_task_loss(adapters, rec.checkpoint_id);
    } else if (!data.dev_task.empty()) {
      rec.dev_task_loss = evaluate_task_loss(model, &adapters, data.dev_task);
    }
    if (!data.dev_align.empty()) {
      rec.dev_align_loss = evaluate_alignment_loss(model, &adapters, data.dev_align, config, mc.num_layers);
    }
    result.log.evals.push_back(rec);
    const std::optional<double> monitored = has_task ? rec.dev_task_loss : rec.dev_align_loss;
    if (!monitored) {
      result.adapters = adapters;
      result.log.best_checkpoint = static_cast<int>(result.log.evals.size()) - 1;
      continue;
    }
    if (!best || *monitored < *best) {
      best = monitored;
      since_best = 0;
      result.adapters = adapters;
      result.log.best_checkpoint = static_cast<int>(result.log.evals.size()) - 1;
    } else if (++since_best >= config.patience) {
      result.log.stopped_early = true;
      break;
    }
  }
  return result;
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"peak_lr", c.peak_lr}, {"warmup_ratio", c.warmup_ratio}, {"batch_size", c.batch_size},
       {"steps", c.steps},     {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  static const std::set<std::string> known = {"peak_lr", "warmup_ratio", "batch_size", "steps", "weight_decay", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("pretrain: unknown key '" + key + "'");
  }
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
}

PretrainLog pretrain(Transformer<float>& model, const std::vector<std::vector<TokenId>>& documents,
                     const PretrainConfig& config) {
  if (documents.empty()) throw ConfigError("pretrain: no documents");
  if (config.batch_size < 1 || config.steps < 0) throw ConfigError("pretrain: invalid batch size or steps");
  const auto& mc = model.config();
  auto& weights = model.mutable_weights();
  auto grads = BaseWeights<float>::zeros(mc);
  const auto grad_list = base_arrays(grads);
  AdamW optimizer(base_arrays(weights), 0.9, 0.98, 1e-8, config.weight_decay);
  std::mt19937_64 rng(config.seed);
  const double warmup = config.warmup_ratio * static_cast<double>(config.steps);

  // Rows of tokens absent from the documents only ever receive the softmax
  // push-down; Adam would turn that into full-size steps, so they stay frozen.
  std::vector<bool> seen(static_cast<std::size_t>(mc.vocab_size), false);
  for (const auto& doc : documents) {
    for (TokenId t : doc) {
      if (t < 0 || t >= mc.vocab_size) throw InputError("pretrain: token id " + std::to_string(t) + " outside the vocabulary");
      seen[static_cast<std::size_t>(t)] = true;
    }
  }
  const Matrix<float> initial_embedding = weights.token_embedding;

  std::vector<std::size_t> order(documents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  PretrainLog log;
  for (long step = 1; step <= config.steps; ++step) {
    std::vector<std::vector<TokenId>> seqs;
    while (static_cast<int>(seqs.size()) < config.batch_size) {
      if (cursor >= order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        cursor = 0;
      }
      seqs.push_back(documents[order[cursor++]]);
    }
    const auto packed = pack_sequences(seqs, mc);
    std::vector<std::int64_t> targets(packed.tokens.size(), 0);
    std::vector<float> token_weights(packed.tokens.size(), 0.0f);
    std::size_t predicted = 0;
    for (const auto& seg : packed.segments) predicted += static_cast<std::size_t>(seg.length - 1);
    for (const auto& seg : packed.segments) {
      for (Eigen::Index p = 0; p + 1 < seg.length; ++p) {
        const auto row = static_cast<std::size_t>(seg.offset + p);
        targets[row] = packed.tokens[row + 1];
        token_weights[row] = 1.0f / static_cast<float>(predicted);
      }
    }
    zero(grad_list);
    ad::Tape<float> tape;
    const auto base = bind(tape, weights, &grads);
    ForwardOptions options{Mode::kTrain, &rng, -1, true};
    const auto fwd = forward(mc, base, static_cast<const BoundAdapters<float>*>(nullptr), packed, options);
    const auto loss = ad::cross_entropy(*fwd.logits, std::move(targets), std::move(token_weights));
    tape.backward(loss);
    optimizer.step(grad_list, objectives::lr_at(step, config.peak_lr, warmup));
    for (std::size_t t = 0; t < seen.size(); ++t) {
      if (!seen[t]) weights.token_embedding.row(static_cast<Eigen::Index>(t)) = initial_embedding.row(static_cast<Eigen::Index>(t));
    }
    log.losses.push_back(loss.item());
  }
  return log;
}

}  // namespace midalign::train
