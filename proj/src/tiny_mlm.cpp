#include "upt/tiny_mlm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "upt/digest.hpp"
#include "upt/error.hpp"
#include "upt/rng.hpp"

namespace upt {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr std::string_view kCheckpointFormat = "upt-forge-checkpoint";
constexpr int kCheckpointVersion = 1;

std::atomic<std::size_t> g_threads{1};

// y[t, o] = b[o] + sum_i x[t, i] W[i, o]; b may be null.
void linear_fwd(const double* x, std::size_t rows, std::size_t in, const double* w,
                const double* b, std::size_t out, double* y) {
  for (std::size_t t = 0; t < rows; ++t) {
    double* yr = y + t * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = b ? b[o] : 0.0;
    const double* xr = x + t * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* wr = w + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
}

// Accumulates dx and db (when non-null) and dW.
void linear_bwd(const double* x, const double* dy, std::size_t rows, std::size_t in,
                const double* w, std::size_t out, double* dx, double* dw, double* db) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyr = dy + t * out;
    const double* xr = x + t * in;
    if (db) {
      for (std::size_t o = 0; o < out; ++o) db[o] += dyr[o];
    }
    for (std::size_t i = 0; i < in; ++i) {
      const double* wr = w + i * out;
      double* dwr = dw + i * out;
      const double xi = xr[i];
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        acc += dyr[o] * wr[o];
        dwr[o] += xi * dyr[o];
      }
      if (dx) dx[t * in + i] += acc;
    }
  }
}

void layernorm_fwd(const double* x, std::size_t rows, std::size_t d, const double* g,
                   const double* b, double* y, double* xhat, double* rstd) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[t] = r;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mean) * r;
      xhat[t * d + i] = h;
      y[t * d + i] = g[i] * h + b[i];
    }
  }
}

// Accumulates dx, dg and db.
void layernorm_bwd(const double* dy, const double* xhat, const double* rstd, std::size_t rows,
                   std::size_t d, const double* g, double* dx, double* dg, double* db) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyr = dy + t * d;
    const double* hr = xhat + t * d;
    double mean_dh = 0.0, mean_dh_h = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dh = dyr[i] * g[i];
      dg[i] += dyr[i] * hr[i];
      db[i] += dyr[i];
      mean_dh += dh;
      mean_dh_h += dh * hr[i];
    }
    mean_dh /= static_cast<double>(d);
    mean_dh_h /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double dh = dyr[i] * g[i];
      dx[t * d + i] += rstd[t] * (dh - mean_dh - hr[i] * mean_dh_h);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerCache {
  std::vector<double> x_in, xhat1, rstd1, h1, q, k, v, att, ctx, x_mid, xhat2, rstd2, h2, pre, act;
};

struct ForwardCache {
  std::size_t len = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_final;
  std::vector<double> xhatf, rstdf, hf;
  std::vector<double> scores;
};

void check_input(const TinyMlm& model, const AugmentedSample& sample) {
  const auto& c = model.config();
  if (sample.token_ids.size() > c.max_len) {
    throw ValidationError(fmt::format("sequence length {} exceeds max_len {}",
                                      sample.token_ids.size(), c.max_len));
  }
  if (sample.mask_index >= sample.token_ids.size()) {
    throw ValidationError("mask_index outside the sequence");
  }
  for (const auto id : sample.token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ValidationError(fmt::format("token id {} outside vocabulary of {}", id, c.vocab_size));
    }
  }
  if (sample.target_word_id < 0 ||
      static_cast<std::size_t>(sample.target_word_id) >= c.vocab_size) {
    throw ValidationError("target id outside vocabulary");
  }
}

void forward_impl(const TinyMlm& model, const AugmentedSample& sample, ForwardCache& cache) {
  check_input(model, sample);
  const auto& c = model.config();
  const auto& L = model.layout();
  const double* p = model.params().data();
  const std::size_t T = sample.token_ids.size();
  const std::size_t d = c.dim;
  const std::size_t F = c.hidden();
  const std::size_t H = c.heads;
  const std::size_t hd = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  cache.len = T;
  std::vector<double> x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = p + L.tok_emb + static_cast<std::size_t>(sample.token_ids[t]) * d;
    const double* pe = p + L.pos_emb + t * d;
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
  }

  cache.layers.resize(c.layers);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& lp = L.layers[l];
    auto& lc = cache.layers[l];
    lc.x_in = x;
    lc.xhat1.resize(T * d);
    lc.rstd1.resize(T);
    lc.h1.resize(T * d);
    layernorm_fwd(x.data(), T, d, p + lp.ln1_g, p + lp.ln1_b, lc.h1.data(), lc.xhat1.data(),
                  lc.rstd1.data());
    lc.q.resize(T * d);
    lc.k.resize(T * d);
    lc.v.resize(T * d);
    linear_fwd(lc.h1.data(), T, d, p + lp.wq, p + lp.bq, d, lc.q.data());
    linear_fwd(lc.h1.data(), T, d, p + lp.wk, nullptr, d, lc.k.data());
    linear_fwd(lc.h1.data(), T, d, p + lp.wv, p + lp.bv, d, lc.v.data());

    lc.att.assign(H * T * T, 0.0);
    lc.ctx.assign(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        double* row = lc.att.data() + (h * T + t) * T;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < T; ++s) {
          double dot = 0.0;
          for (std::size_t j = 0; j < hd; ++j) dot += lc.q[t * d + h * hd + j] * lc.k[s * d + h * hd + j];
          row[s] = dot * scale;
          mx = std::max(mx, row[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          row[s] = std::exp(row[s] - mx);
          sum += row[s];
        }
        for (std::size_t s = 0; s < T; ++s) row[s] /= sum;
        double* cr = lc.ctx.data() + t * d + h * hd;
        for (std::size_t s = 0; s < T; ++s) {
          const double a = row[s];
          const double* vr = lc.v.data() + s * d + h * hd;
          for (std::size_t j = 0; j < hd; ++j) cr[j] += a * vr[j];
        }
      }
    }
    std::vector<double> attn_out(T * d);
    linear_fwd(lc.ctx.data(), T, d, p + lp.wo, p + lp.bo, d, attn_out.data());
    lc.x_mid.resize(T * d);
    for (std::size_t i = 0; i < T * d; ++i) lc.x_mid[i] = lc.x_in[i] + attn_out[i];

    lc.xhat2.resize(T * d);
    lc.rstd2.resize(T);
    lc.h2.resize(T * d);
    layernorm_fwd(lc.x_mid.data(), T, d, p + lp.ln2_g, p + lp.ln2_b, lc.h2.data(),
                  lc.xhat2.data(), lc.rstd2.data());
    lc.pre.resize(T * F);
    lc.act.resize(T * F);
    linear_fwd(lc.h2.data(), T, d, p + lp.w1, p + lp.b1, F, lc.pre.data());
    for (std::size_t i = 0; i < T * F; ++i) lc.act[i] = gelu(lc.pre[i]);
    std::vector<double> ffn_out(T * d);
    linear_fwd(lc.act.data(), T, F, p + lp.w2, p + lp.b2, d, ffn_out.data());
    for (std::size_t i = 0; i < T * d; ++i) x[i] = lc.x_mid[i] + ffn_out[i];
  }
  cache.x_final = std::move(x);

  const double* xm = cache.x_final.data() + sample.mask_index * d;
  cache.xhatf.resize(d);
  cache.rstdf.resize(1);
  cache.hf.resize(d);
  layernorm_fwd(xm, 1, d, p + L.lnf_g, p + L.lnf_b, cache.hf.data(), cache.xhatf.data(),
                cache.rstdf.data());
  cache.scores.resize(c.vocab_size);
  for (std::size_t vtok = 0; vtok < c.vocab_size; ++vtok) {
    const double* wr = p + L.out_w + vtok * d;
    double s = p[L.out_b + vtok];
    for (std::size_t i = 0; i < d; ++i) s += wr[i] * cache.hf[i];
    cache.scores[vtok] = s;
  }
}

// Accumulates d(loss)/d(params) into grad given d(loss)/d(scores).
void backward_impl(const TinyMlm& model, const AugmentedSample& sample, const ForwardCache& cache,
                   std::span<const double> dscores, double* grad) {
  const auto& c = model.config();
  const auto& L = model.layout();
  const double* p = model.params().data();
  const std::size_t T = cache.len;
  const std::size_t d = c.dim;
  const std::size_t F = c.hidden();
  const std::size_t H = c.heads;
  const std::size_t hd = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Output head.
  std::vector<double> dhf(d, 0.0);
  for (std::size_t vtok = 0; vtok < c.vocab_size; ++vtok) {
    const double ds = dscores[vtok];
    if (ds == 0.0) continue;
    grad[L.out_b + vtok] += ds;
    const double* wr = p + L.out_w + vtok * d;
    double* gw = grad + L.out_w + vtok * d;
    for (std::size_t i = 0; i < d; ++i) {
      gw[i] += ds * cache.hf[i];
      dhf[i] += ds * wr[i];
    }
  }
  std::vector<double> dx(T * d, 0.0);
  layernorm_bwd(dhf.data(), cache.xhatf.data(), cache.rstdf.data(), 1, d, p + L.lnf_g,
                dx.data() + sample.mask_index * d, grad + L.lnf_g, grad + L.lnf_b);

  for (std::size_t l = c.layers; l-- > 0;) {
    const auto& lp = L.layers[l];
    const auto& lc = cache.layers[l];

    // Feed-forward block: x_out = x_mid + W2 gelu(W1 LN2(x_mid)).
    std::vector<double> dx_mid = dx;
    std::vector<double> dact(T * F, 0.0);
    linear_bwd(lc.act.data(), dx.data(), T, F, p + lp.w2, d, dact.data(), grad + lp.w2,
               grad + lp.b2);
    for (std::size_t i = 0; i < T * F; ++i) dact[i] *= gelu_grad(lc.pre[i]);
    std::vector<double> dh2(T * d, 0.0);
    linear_bwd(lc.h2.data(), dact.data(), T, d, p + lp.w1, F, dh2.data(), grad + lp.w1,
               grad + lp.b1);
    layernorm_bwd(dh2.data(), lc.xhat2.data(), lc.rstd2.data(), T, d, p + lp.ln2_g,
                  dx_mid.data(), grad + lp.ln2_g, grad + lp.ln2_b);

    // Attention block: x_mid = x_in + Wo attn(LN1(x_in)).
    std::vector<double> dx_in = dx_mid;
    std::vector<double> dctx(T * d, 0.0);
    linear_bwd(lc.ctx.data(), dx_mid.data(), T, d, p + lp.wo, d, dctx.data(), grad + lp.wo,
               grad + lp.bo);
    std::vector<double> dq(T * d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0);
    std::vector<double> datt(T);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* row = lc.att.data() + (h * T + t) * T;
        const double* dcr = dctx.data() + t * d + h * hd;
        double dot_sum = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          const double* vr = lc.v.data() + s * d + h * hd;
          double* dvr = dv.data() + s * d + h * hd;
          double acc = 0.0;
          for (std::size_t j = 0; j < hd; ++j) {
            acc += dcr[j] * vr[j];
            dvr[j] += row[s] * dcr[j];
          }
          datt[s] = acc;
          dot_sum += row[s] * acc;
        }
        const double* qr = lc.q.data() + t * d + h * hd;
        double* dqr = dq.data() + t * d + h * hd;
        for (std::size_t s = 0; s < T; ++s) {
          const double dscore = row[s] * (datt[s] - dot_sum) * scale;
          if (dscore == 0.0) continue;
          const double* kr = lc.k.data() + s * d + h * hd;
          double* dkr = dk.data() + s * d + h * hd;
          for (std::size_t j = 0; j < hd; ++j) {
            dqr[j] += dscore * kr[j];
            dkr[j] += dscore * qr[j];
          }
        }
      }
    }
    std::vector<double> dh1(T * d, 0.0);
    linear_bwd(lc.h1.data(), dq.data(), T, d, p + lp.wq, d, dh1.data(), grad + lp.wq, grad + lp.bq);
    linear_bwd(lc.h1.data(), dk.data(), T, d, p + lp.wk, d, dh1.data(), grad + lp.wk, nullptr);
    linear_bwd(lc.h1.data(), dv.data(), T, d, p + lp.wv, d, dh1.data(), grad + lp.wv, grad + lp.bv);
    layernorm_bwd(dh1.data(), lc.xhat1.data(), lc.rstd1.data(), T, d, p + lp.ln1_g, dx_in.data(),
                  grad + lp.ln1_g, grad + lp.ln1_b);
    dx = std::move(dx_in);
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* ge = grad + L.tok_emb + static_cast<std::size_t>(sample.token_ids[t]) * d;
    double* gp = grad + L.pos_emb + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      ge[i] += dx[t * d + i];
      gp[i] += dx[t * d + i];
    }
  }
}

double log_softmax_at(std::span<const double> scores, std::size_t index) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (const double s : scores) sum += std::exp(s - mx);
  return scores[index] - mx - std::log(sum);
}

struct WorkItem {
  const AugmentedSample* sample;
  double coefficient;  // d total / d nll for this sample
};

// Per-sample negative log-likelihoods and, when grads is non-empty, the
// per-sample gradient buffers (each already scaled by its coefficient).
void run_items(const TinyMlm& model, std::span<const WorkItem> items, std::vector<double>& nll,
               std::vector<std::vector<double>>* grads) {
  nll.assign(items.size(), 0.0);
  if (grads) grads->assign(items.size(), {});
  auto work = [&](std::size_t i) {
    ForwardCache cache;
    const auto& s = *items[i].sample;
    forward_impl(model, s, cache);
    const auto target = static_cast<std::size_t>(s.target_word_id);
    nll[i] = -log_softmax_at(cache.scores, target);
    if (grads) {
      auto probs = softmax(cache.scores);
      for (auto& pr : probs) pr *= items[i].coefficient;
      probs[target] -= items[i].coefficient;
      auto& g = (*grads)[i];
      g.assign(model.num_params(), 0.0);
      backward_impl(model, s, cache, probs, g.data());
    }
  };
  const std::size_t n_threads = std::min(thread_count(), items.size());
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < items.size(); ++i) work(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(n_threads);
  for (std::size_t tid = 0; tid < n_threads; ++tid) {
    pool.emplace_back([&, tid] {
      try {
        for (std::size_t i = tid; i < items.size(); i += n_threads) work(i);
      } catch (...) {
        errors[tid] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

LossReport evaluate_losses(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                           std::span<const AugmentedSample> ksmlm, double lambda, bool weighted,
                           std::span<double> grad) {
  if (supervised.empty()) throw ValidationError("loss: supervised batch is empty");
  if (lambda < 0.0) throw ValidationError("loss: lambda must be >= 0");
  const double n_sup = static_cast<double>(supervised.size());
  const double n_ks = static_cast<double>(ksmlm.size());
  std::vector<WorkItem> items;
  items.reserve(supervised.size() + ksmlm.size());
  for (const auto& s : supervised) items.push_back({&s, (weighted ? s.weight : 1.0) / n_sup});
  for (const auto& s : ksmlm) items.push_back({&s, lambda / n_ks});

  std::vector<double> nll;
  std::vector<std::vector<double>> grads;
  run_items(model, items, nll, grad.empty() ? nullptr : &grads);

  LossReport r;
  double sup = 0.0;
  for (std::size_t i = 0; i < supervised.size(); ++i) {
    sup += (weighted ? supervised[i].weight : 1.0) * nll[i];
  }
  r.supervised = sup / n_sup;
  if (!ksmlm.empty()) {
    double ks = 0.0;
    for (std::size_t i = supervised.size(); i < items.size(); ++i) ks += nll[i];
    r.ksmlm = ks / n_ks;
  }
  r.total = r.supervised + lambda * r.ksmlm;

  if (!grad.empty()) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& g : grads) {
      for (std::size_t j = 0; j < g.size(); ++j) grad[j] += g[j];
    }
  }
  return r;
}

std::vector<std::size_t> pick_check_indices(const TinyMlm& model, const GradCheckOptions& opt) {
  const auto total = model.num_params();
  std::vector<std::size_t> idx;
  if (!opt.subset) {
    idx.resize(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    return idx;
  }
  Rng rng(opt.seed);
  std::set<std::size_t> chosen;
  const double want = static_cast<double>(std::min(*opt.subset, total));
  for (const auto& b : model.layout().blocks) {
    auto n = static_cast<std::size_t>(std::llround(want * static_cast<double>(b.size()) /
                                                   static_cast<double>(total)));
    n = std::min(b.size(), std::max<std::size_t>(n, 1));
    std::vector<std::size_t> pool(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) pool[i] = b.offset + i;
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + rng.uniform_index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      chosen.insert(pool[i]);
    }
  }
  while (chosen.size() < static_cast<std::size_t>(want)) chosen.insert(rng.uniform_index(total));
  if (opt.fault) chosen.insert(opt.fault->first);
  return {chosen.begin(), chosen.end()};
}

const ParamBlock& block_of(const ParamLayout& layout, std::size_t index) {
  for (const auto& b : layout.blocks) {
    if (index >= b.offset && index < b.offset + b.size()) return b;
  }
  throw ValidationError("parameter index outside layout");
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ValidationError("model config: vocab_size must be >= 1");
  if (dim < 1) throw ValidationError("model config: dim must be >= 1");
  if (heads < 1) throw ValidationError("model config: heads must be >= 1");
  if (dim % heads != 0) {
    throw ValidationError(fmt::format("model config: dim {} is not divisible by heads {}", dim, heads));
  }
  if (max_len < 1) throw ValidationError("model config: max_len must be >= 1");
}

ordered_json ModelConfig::to_json() const {
  return ordered_json{{"vocab_size", vocab_size}, {"dim", dim},         {"layers", layers},
                      {"heads", heads},           {"max_len", max_len}, {"tie_output", tie_output},
                      {"ffn_dim", hidden()}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.tie_output = j.at("tie_output").get<bool>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("model config: {}", e.what()));
  }
  c.validate();
  return c;
}

ParamLayout ParamLayout::make(const ModelConfig& c) {
  c.validate();
  ParamLayout L;
  std::size_t off = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    L.blocks.push_back({std::move(name), off, rows, cols});
    const auto at = off;
    off += rows * cols;
    return at;
  };
  const auto d = c.dim;
  const auto F = c.hidden();
  L.tok_emb = add("tok_emb", c.vocab_size, d);
  L.pos_emb = add("pos_emb", c.max_len, d);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto pre = fmt::format("layer{}.", l);
    LayerParams lp{};
    lp.ln1_g = add(pre + "ln1_g", 1, d);
    lp.ln1_b = add(pre + "ln1_b", 1, d);
    lp.wq = add(pre + "wq", d, d);
    lp.bq = add(pre + "bq", 1, d);
    lp.wk = add(pre + "wk", d, d);
    lp.wv = add(pre + "wv", d, d);
    lp.bv = add(pre + "bv", 1, d);
    lp.wo = add(pre + "wo", d, d);
    lp.bo = add(pre + "bo", 1, d);
    lp.ln2_g = add(pre + "ln2_g", 1, d);
    lp.ln2_b = add(pre + "ln2_b", 1, d);
    lp.w1 = add(pre + "w1", d, F);
    lp.b1 = add(pre + "b1", 1, F);
    lp.w2 = add(pre + "w2", F, d);
    lp.b2 = add(pre + "b2", 1, d);
    L.layers.push_back(lp);
  }
  L.lnf_g = add("lnf_g", 1, d);
  L.lnf_b = add("lnf_b", 1, d);
  L.out_w = c.tie_output ? L.tok_emb : add("out_w", c.vocab_size, d);
  L.out_b = add("out_b", 1, c.vocab_size);
  L.total = off;
  return L;
}

TinyMlm::TinyMlm(ModelConfig config, std::vector<double> params)
    : config_(config), layout_(ParamLayout::make(config)), params_(std::move(params)) {
  if (params_.size() != layout_.total) {
    throw ValidationError(fmt::format("model: expected {} parameters, got {}", layout_.total,
                                      params_.size()));
  }
  for (const double v : params_) {
    if (!std::isfinite(v)) throw ValidationError("model: non-finite parameter");
  }
}

TinyMlm TinyMlm::init(const ModelConfig& config, std::uint64_t seed) {
  const auto layout = ParamLayout::make(config);
  std::vector<double> p(layout.total, 0.0);
  Rng rng(seed);
  for (const auto& b : layout.blocks) {
    const auto dot = b.name.find('.');
    const auto leaf = dot == std::string::npos ? b.name : b.name.substr(dot + 1);
    double* at = p.data() + b.offset;
    if (leaf.ends_with("_g")) {
      std::fill(at, at + b.size(), 1.0);
    } else if (leaf.ends_with("_b") || leaf.starts_with('b')) {
      std::fill(at, at + b.size(), 0.0);
    } else {
      for (std::size_t i = 0; i < b.size(); ++i) at[i] = rng.normal(0.0, kInitStd);
    }
  }
  return TinyMlm(config, std::move(p));
}

std::string TinyMlm::digest() const {
  return sha256_hex(std::string_view(reinterpret_cast<const char*>(params_.data()),
                                     params_.size() * sizeof(double)));
}

std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  if (scores.empty()) return out;
  const double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

PredictionDistribution forward(const TinyMlm& model, const AugmentedSample& sample) {
  ForwardCache cache;
  forward_impl(model, sample, cache);
  PredictionDistribution d;
  d.probs = softmax(cache.scores);
  d.scores = std::move(cache.scores);
  return d;
}

double loss_supervised(const TinyMlm& model, std::span<const AugmentedSample> batch, bool weighted) {
  return evaluate_losses(model, batch, {}, 0.0, weighted, {}).supervised;
}

double loss_ksmlm(const TinyMlm& model, std::span<const AugmentedSample> batch) {
  return evaluate_losses(model, batch, {}, 0.0, false, {}).supervised;
}

LossReport total_loss(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                      std::span<const AugmentedSample> ksmlm, double lambda, bool weighted) {
  return evaluate_losses(model, supervised, ksmlm, lambda, weighted, {});
}

LossReport total_loss_and_grad(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                               std::span<const AugmentedSample> ksmlm, double lambda,
                               bool weighted, std::span<double> grad) {
  if (grad.size() != model.num_params()) {
    throw ValidationError("total_loss_and_grad: gradient buffer has the wrong size");
  }
  return evaluate_losses(model, supervised, ksmlm, lambda, weighted, grad);
}

GradCheckResult grad_check(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                           std::span<const AugmentedSample> ksmlm, const GradCheckOptions& opt) {
  if (!(opt.epsilon >= 1e-6 && opt.epsilon <= 1e-3)) {
    throw ValidationError("grad_check: epsilon must lie in [1e-6, 1e-3]");
  }
  if (opt.subset && *opt.subset == 0) throw ValidationError("grad_check: empty parameter subset");
  if (!opt.subset && model.num_params() > 50000) {
    throw ValidationError("grad_check: model too large for a full check; request a subset");
  }

  std::vector<double> analytic(model.num_params());
  const auto base = total_loss_and_grad(model, supervised, ksmlm, opt.lambda, opt.weighted, analytic);
  if (!std::isfinite(base.total)) throw RuntimeError("grad_check: non-finite loss");
  if (opt.fault) analytic.at(opt.fault->first) *= opt.fault->second;

  TinyMlm probe = model;
  auto params = probe.params();
  GradCheckResult r;
  for (const auto i : pick_check_indices(model, opt)) {
    const double orig = params[i];
    params[i] = orig + opt.epsilon;
    const double plus = total_loss(probe, supervised, ksmlm, opt.lambda, opt.weighted).total;
    params[i] = orig - opt.epsilon;
    const double minus = total_loss(probe, supervised, ksmlm, opt.lambda, opt.weighted).total;
    params[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw RuntimeError("grad_check: non-finite loss");
    }
    const double numeric = (plus - minus) / (2.0 * opt.epsilon);
    const double a = analytic[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (r.checked++ == 0 || rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
      r.worst_block = block_of(model.layout(), i).name;
    }
  }
  return r;
}

AdamOptimizer::AdamOptimizer(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void AdamOptimizer::step(std::span<double> params, std::span<const double> grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
  }
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ValidationError("train config: lambda must be >= 0");
  if (!(learning_rate > 0.0)) throw ValidationError("train config: learning_rate must be > 0");
  if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (grad_clip && !(*grad_clip > 0.0)) throw ValidationError("train config: grad_clip must be > 0");
}

ordered_json TrainConfig::to_json() const {
  ordered_json j{{"lambda", lambda},
                 {"learning_rate", learning_rate},
                 {"adam_betas", {beta1, beta2}},
                 {"adam_epsilon", epsilon},
                 {"steps", steps},
                 {"batch_size", batch_size},
                 {"seed", seed},
                 {"ksmlm_mix", ksmlm_mix == KsmlmMix::loss_multiplier ? "loss-multiplier"
                                                                      : "sub-batch-share"}};
  j["grad_clip"] = grad_clip ? ordered_json(*grad_clip) : ordered_json(nullptr);
  return j;
}

std::vector<LossPoint> train(TinyMlm& model, std::span<const std::vector<AugmentedSample>> pools,
                             std::span<const AugmentedSample> ksmlm_pool, const SamplerPlan& plan,
                             const TrainConfig& config, const StepCallback& on_step) {
  config.validate();
  Rng rng(config.seed);
  AdamOptimizer adam(model.num_params(), config.learning_rate, config.beta1, config.beta2,
                     config.epsilon);
  const BatchPolicy policy{config.batch_size, config.ksmlm_mix, config.lambda};
  const auto ks_pool = config.lambda > 0.0 ? ksmlm_pool : std::span<const AugmentedSample>{};
  const double multiplier = config.ksmlm_mix == KsmlmMix::loss_multiplier ? config.lambda : 1.0;
  const bool weighted = plan.mode == MixMode::loss_weighted;

  std::vector<LossPoint> curve;
  curve.reserve(config.steps);
  std::vector<double> grad(model.num_params());
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto batch = draw_batch(pools, ks_pool, plan, policy, rng);
    const auto rep =
        total_loss_and_grad(model, batch.supervised, batch.ksmlm, multiplier, weighted, grad);
    if (!std::isfinite(rep.total)) {
      throw RuntimeError(fmt::format("training diverged at step {} (loss {})", step, rep.total));
    }
    if (config.grad_clip) {
      double norm = 0.0;
      for (const double g : grad) norm += g * g;
      norm = std::sqrt(norm);
      if (norm > *config.grad_clip) {
        const double s = *config.grad_clip / norm;
        for (auto& g : grad) g *= s;
      }
    }
    adam.step(model.params(), grad);
    curve.push_back({step, rep.supervised, rep.ksmlm, rep.total});
    if (on_step) on_step(step, model);
  }
  return curve;
}

std::string loss_curve_csv(std::span<const LossPoint> curve) {
  std::string out = "step,L_supervised,L_KSMLM,L_total\n";
  for (const auto& p : curve) {
    out += fmt::format("{},{},{},{}\n", p.step, p.supervised, p.ksmlm, p.total);
  }
  return out;
}

EvalResult evaluate(const TinyMlm& model, std::span<const AugmentedSample> eval_set) {
  if (eval_set.empty()) throw ValidationError("evaluate: empty evaluation set");
  EvalResult r;
  for (const auto& s : eval_set) {
    const auto dist = forward(model, s);
    const auto pred = classify(dist.probs, s.candidate_word_ids);
    if (r.per_class.size() <= s.gold_label_index) r.per_class.resize(s.gold_label_index + 1);
    auto& pc = r.per_class[s.gold_label_index];
    ++pc.total;
    ++r.total;
    if (pred == s.gold_label_index) {
      ++pc.correct;
      ++r.correct;
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

EmbeddingTable export_embeddings(const TinyMlm& model, const Vocabulary& vocab) {
  if (vocab.size() != model.config().vocab_size) {
    throw ValidationError("export_embeddings: vocabulary size does not match the model");
  }
  const auto d = model.config().dim;
  EmbeddingTable table(d);
  const double* emb = model.params().data() + model.layout().tok_emb;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    if (vocab.is_special(static_cast<TokenId>(id))) continue;
    table.add(vocab.tokens()[id], std::vector<double>(emb + id * d, emb + (id + 1) * d));
  }
  return table;
}

std::string serialize_checkpoint(const TinyMlm& model, const std::string& vocab_hash) {
  ordered_json blocks = ordered_json::array();
  for (const auto& b : model.layout().blocks) {
    const auto begin = model.params().begin() + static_cast<std::ptrdiff_t>(b.offset);
    blocks.push_back(ordered_json{{"name", b.name},
                                  {"shape", {b.rows, b.cols}},
                                  {"values", std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(b.size()))}});
  }
  const ordered_json j{{"format", kCheckpointFormat},
                       {"version", kCheckpointVersion},
                       {"config", model.config().to_json()},
                       {"vocab_hash", vocab_hash},
                       {"parameters", blocks}};
  return j.dump() + "\n";
}

void save_checkpoint(const TinyMlm& model, const std::string& vocab_hash,
                     const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(model, vocab_hash));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    const auto j = json::parse(text);
    if (j.at("format").get<std::string>() != kCheckpointFormat ||
        j.at("version").get<int>() != kCheckpointVersion) {
      throw ValidationError("unsupported checkpoint format or version");
    }
    const auto config = ModelConfig::from_json(j.at("config"));
    const auto layout = ParamLayout::make(config);
    const auto& blocks = j.at("parameters");
    if (blocks.size() != layout.blocks.size()) throw ValidationError("parameter block count mismatch");
    std::vector<double> params(layout.total);
    for (std::size_t i = 0; i < layout.blocks.size(); ++i) {
      const auto& want = layout.blocks[i];
      const auto& got = blocks[i];
      const auto shape = got.at("shape").get<std::vector<std::size_t>>();
      if (got.at("name").get<std::string>() != want.name || shape.size() != 2 ||
          shape[0] != want.rows || shape[1] != want.cols) {
        throw ValidationError(fmt::format("parameter block {} ('{}') does not match the layout", i, want.name));
      }
      const auto values = got.at("values").get<std::vector<double>>();
      if (values.size() != want.size()) {
        throw ValidationError(fmt::format("parameter block '{}' has the wrong size", want.name));
      }
      std::copy(values.begin(), values.end(), params.begin() + static_cast<std::ptrdiff_t>(want.offset));
    }
    return {TinyMlm(config, std::move(params)), j.at("vocab_hash").get<std::string>()};
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: bad checkpoint: {}", path.string(), e.what()));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void set_thread_count(std::size_t n) { g_threads = std::max<std::size_t>(n, 1); }
std::size_t thread_count() { return g_threads; }

}  // namespace upt
