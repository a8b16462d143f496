#include "hier/gradient_suite.h"

#include "hier/contrast.h"
#include "hier/encoder.h"
#include "hier/gates.h"
#include "hier/rng.h"

namespace hier {

namespace {

TermCheck run(const std::string& term, ParamStore& params, const LossFunction& loss,
              double step, const std::vector<std::string>& only = {}) {
  TermCheck out{term, grad_check(params, loss, step, only), 0.0};
  out.max_rel_error = max_error(out.errors);
  return out;
}

}  // namespace

std::vector<TermCheck> pretrain_gradient_checks(MicroInstance& mi, double step) {
  const KnowledgeGraph& g = mi.graph;
  const TrainConfig cfg = mi.cfg;
  const NeighborPolicy policy{0, cfg.seed, 0};
  const ParamStore saved = mi.params;
  std::vector<TermCheck> out;

  // Original-view L_ET through the encoder.
  out.push_back(run(
      "L_ET", mi.params,
      [&](ParamStore& p, bool with_grad) {
        if (with_grad) p.zero_grad();
        EncoderPass pass(g, cfg.encoder(), p, policy);
        const BatchView v = gather_batch(pass, mi.batch);
        const PairLoss et = loss_et(v.records, v.hu, v.hi);
        if (with_grad) {
          scatter_batch_grads(pass, v, et.grad_users, et.grad_items);
          pass.backward(p);
        }
        return et.loss;
      },
      step));

  // Exemplar contrast over every item of the graph.
  out.push_back(run(
      "L_ECL", mi.params,
      [&](ParamStore& p, bool with_grad) {
        if (with_grad) p.zero_grad();
        EncoderPass pass(g, cfg.encoder(), p, policy);
        DenseMatrix items(g.items.size(), cfg.dim);
        for (Index i = 0; i < g.items.size(); ++i) {
          const Vector h = pass.item(i);
          std::copy(h.begin(), h.end(), items.row(i).begin());
        }
        const BankContrastResult r = loss_ecl(items, p.value(kExemplarBank), cfg.contrast());
        if (with_grad) {
          for (Index i = 0; i < g.items.size(); ++i) pass.add_item_grad(i, r.grad_reprs.row(i));
          pass.backward(p);
          axpy(1.0, r.grad_bank.values(), p.grad(kExemplarBank).values());
        }
        return r.value;
      },
      step));

  // L_IB: revised task + lambda1 agreement with the gated path.
  {
    TrainConfig ib = cfg;
    ib.lambda2 = 0.0;
    ib.lambda3 = 0.0;
    const GateMode gates = GateMode::frozen(mi.gate_noise);
    out.push_back(run(
        "L_IB", mi.params,
        [&, ib](ParamStore& p, bool with_grad) {
          return assemble_pretrain_loss(g, ib, p, mi.batch, gates, policy, with_grad).total;
        },
        step));
  }

  out.push_back(run(
      "expected_L0", mi.params,
      [&](ParamStore& p, bool with_grad) {
        if (with_grad) p.zero_grad();
        DenseMatrix grad;
        const double v = expected_l0(p.value(kGateLogAlpha), cfg.hard_concrete, &grad);
        if (with_grad) p.grad(kGateLogAlpha) = grad;
        return v;
      },
      step, {kGateLogAlpha}));

  {
    TrainConfig full = cfg;
    full.original_view_loss = true;
    const GateMode gates = GateMode::frozen(mi.gate_noise);
    out.push_back(run(
        "L_PT", mi.params,
        [&, full](ParamStore& p, bool with_grad) {
          return assemble_pretrain_loss(g, full, p, mi.batch, gates, policy, with_grad).total;
        },
        step));
  }

  mi.params = saved;
  return out;
}

TargetDomainData micro_target() {
  TargetDomainData t;
  for (const char* id : {"u0", "u2", "new_user"}) t.users.intern(id);
  const std::vector<std::vector<Index>> ents = {{0, 4}, {9}, {2, 7, 11}, {5}};
  for (std::size_t i = 0; i < ents.size(); ++i) t.items.intern("t" + std::to_string(i));
  t.item_entities = ents;
  t.train = {{0, 0, 1, 1}, {0, 1, 0, 2}, {1, 2, 1, 3}, {2, 3, 1, 4}, {2, 0, 0, 5}};
  t.test = {{0, 2, 1, 6}, {2, 1, 1, 7}};
  t.user_profiles = {{{"segment", "a"}, {"age", "30"}},
                     {{"segment", "b"}},
                     {{"segment", "a"}, {"age", "40"}}};
  t.item_profiles = {{{"category", "x"}}, {{"category", "y"}}, {{"category", "x"}}, {}};
  return t;
}

TermCheck finetune_gradient_check(const MicroInstance& mi, bool with_intents, double step) {
  const TargetDomainData t = micro_target();
  const TargetEncodings enc = encode_target(mi.graph, mi.params, mi.cfg, t);
  const FieldVocab vocab = FieldVocab::build(t);
  HeadConfig hc;
  hc.hidden1 = 6;
  hc.hidden2 = 5;
  hc.fm_dim = 3;
  hc.deep_hidden = 4;
  hc.deep_out = 2;
  hc.seed = mi.cfg.seed;
  ParamStore head = init_head(mi.cfg.dim, vocab.num_fields(), vocab.total_size(), hc);
  Rng rng(mi.cfg.seed, "micro_head");
  for (auto& s : head.slices()) {
    for (double& x : s.value.values()) x += 0.3 * rng.normal();
  }
  const DenseMatrix& intents = mi.params.value(kIntentBank);

  std::vector<FinetuneExample> batch;
  std::vector<std::vector<Index>> rows;
  for (const auto& r : t.train) {
    batch.push_back({r.user, r.item, r.label});
    rows.push_back(example_rows(vocab, t, r.user, r.item));
  }
  // Head and bank are checked as one store so cross terms are covered.
  ParamStore joint = head;
  if (with_intents) joint.add(kIntentBank, intents.rows(), intents.cols()) = intents;
  const auto split_eval = [&](ParamStore& p, bool with_grad) {
    ParamStore h, b;
    for (const auto& s : p.slices()) {
      ParamStore& dst = s.name == kIntentBank ? b : h;
      dst.add(s.name, s.value.rows(), s.value.cols()) = s.value;
    }
    const double loss =
        finetune_loss(enc, h, with_intents ? &b : nullptr, batch, rows, with_grad);
    if (with_grad) {
      p.zero_grad();
      for (const auto& s : h.slices()) p.grad(s.name) = s.grad;
      if (with_intents) p.grad(kIntentBank) = b.grad(kIntentBank);
    }
    return loss;
  };
  return run("finetune_head", joint, split_eval, step);
}

}  // namespace hier
