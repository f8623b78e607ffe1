#include "kil/nn.hpp"

#include <cmath>

namespace kil::nn {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void init_linear(Mat& w, Rng& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(w.rows()));
  for (int i = 0; i < w.rows(); ++i) {
    for (int j = 0; j < w.cols(); ++j) w(i, j) = stddev * rng.normal();
  }
}

// y = x @ w + b (b broadcast over rows)
void linear_forward(const Mat& x, const Mat& w, const Mat& b, Mat* y) {
  y->noalias() = x * w;
  y->rowwise() += b.row(0);
}

void linear_backward(const Mat& x, const Mat& w, const Mat& d_y, Mat* d_w,
                     Mat* d_b, Mat* d_x) {
  d_w->noalias() += x.transpose() * d_y;
  d_b->row(0) += d_y.colwise().sum();
  if (d_x != nullptr) d_x->noalias() = d_y * w.transpose();
}

void layer_norm_forward(const Mat& x, const Mat& g, const Mat& b, Mat* xhat,
                        Vec* inv_std, Mat* y) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  xhat->resize(rows, d);
  inv_std->resize(rows);
  y->resize(rows, d);
  for (int i = 0; i < rows; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / d;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[i] = is;
    xhat->row(i) = (x.row(i).array() - mu) * is;
    y->row(i) = xhat->row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
}

void layer_norm_backward(const Mat& xhat, const Vec& inv_std, const Mat& g,
                         const Mat& d_y, Mat* d_g, Mat* d_b, Mat* d_x) {
  const int rows = static_cast<int>(xhat.rows());
  const int d = static_cast<int>(xhat.cols());
  d_g->row(0) += (d_y.array() * xhat.array()).colwise().sum().matrix();
  d_b->row(0) += d_y.colwise().sum();
  d_x->resize(rows, d);
  for (int i = 0; i < rows; ++i) {
    const Eigen::RowVectorXd dxhat = d_y.row(i).cwiseProduct(g.row(0));
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    d_x->row(i) =
        ((dxhat.array() - m1) - xhat.row(i).array() * m2) * inv_std[i];
  }
}

void gelu_forward(const Mat& pre, Mat* act) {
  act->resize(pre.rows(), pre.cols());
  const double* p = pre.data();
  double* a = act->data();
  const Eigen::Index n = pre.size();
  for (Eigen::Index i = 0; i < n; ++i) a[i] = gelu(p[i]);
}

void gelu_backward_inplace(const Mat& pre, Mat* d) {
  const double* p = pre.data();
  double* g = d->data();
  const Eigen::Index n = pre.size();
  for (Eigen::Index i = 0; i < n; ++i) g[i] *= gelu_grad(p[i]);
}

}  // namespace

Mat& ParamSet::add(const std::string& name, int rows, int cols) {
  auto [it, inserted] = tensors.emplace(name, Mat::Zero(rows, cols));
  require(inserted, "internal", "duplicate parameter " + name);
  return it->second;
}

Mat& ParamSet::at(const std::string& name) {
  auto it = tensors.find(name);
  require(it != tensors.end(), "internal", "unknown parameter " + name);
  return it->second;
}

const Mat& ParamSet::at(const std::string& name) const {
  auto it = tensors.find(name);
  require(it != tensors.end(), "internal", "unknown parameter " + name);
  return it->second;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : tensors) {
    out.tensors.emplace(name, Mat::Zero(t.rows(), t.cols()));
  }
  return out;
}

void ParamSet::set_zero() {
  for (auto& [name, t] : tensors) t.setZero();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

Mat sincos_embed(int d, int n) {
  if (d < 2 || d % 2 != 0) fail("invalid-dim", "embedding dim must be even and >= 2");
  require(n >= 1, "invalid-dim", "need at least one row");
  const int half = d / 2;
  Mat out(n, d);
  for (int i = 0; i < half; ++i) {
    const double omega =
        std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    for (int p = 0; p < n; ++p) {
      const double e = static_cast<double>(p) * omega;
      out(p, i) = std::sin(e);
      out(p, half + i) = std::cos(e);
    }
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

TransformerEncoder::TransformerEncoder(const EncoderConfig& cfg,
                                       const std::string& prefix,
                                       ParamSet* params, Rng* init_rng)
    : cfg_(cfg), prefix_(prefix) {
  const int d = cfg.d_model;
  require(d % cfg.n_heads == 0, "invalid-dim", "d_model must divide by n_heads");
  positional = sincos_embed(d, cfg.keypoint_slots + 1);

  auto linear = [&](const std::string& name, int rows, int cols) {
    Mat& w = params->add(key(name + ".w"), rows, cols);
    init_linear(w, *init_rng);
    params->add(key(name + ".b"), 1, cols);
  };

  linear("tok.kp", cfg.token_in_dim, d);
  linear("tok.ee0", cfg.proprio_dim, 2 * d);
  linear("tok.ee1", 2 * d, 2 * d);
  linear("tok.ee2", 2 * d, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = "enc" + std::to_string(l) + ".";
    params->add(key(lp + "ln1.g"), 1, d).setOnes();
    params->add(key(lp + "ln1.b"), 1, d);
    linear(lp + "wq", d, d);
    linear(lp + "wk", d, d);
    linear(lp + "wv", d, d);
    linear(lp + "wo", d, d);
    params->add(key(lp + "ln2.g"), 1, d).setOnes();
    params->add(key(lp + "ln2.b"), 1, d);
    linear(lp + "ff1", d, cfg.ff_dim);
    linear(lp + "ff2", cfg.ff_dim, d);
  }
  if (cfg.class_maxpool) {
    Mat& cls = params->add(key("cls"), 1, d);
    init_linear(cls, *init_rng);
    linear("pool", 2 * d, d);
  }
}

Mat TransformerEncoder::forward(const ParamSet& params, const Mat& kp_in,
                                const Mat& proprio, EncoderCache* cache) const {
  const int d = cfg_.d_model;
  const int kk = cfg_.keypoint_slots;
  const int frames = static_cast<int>(proprio.rows());
  require(kp_in.rows() == static_cast<Eigen::Index>(frames) * kk &&
              kp_in.cols() == cfg_.token_in_dim,
          "shape", "keypoint token input has wrong shape");
  require(proprio.cols() == cfg_.proprio_dim, "shape",
          "proprio input has wrong shape");
  const int n_tok = cfg_.tokens_per_frame();
  const int base = cfg_.class_maxpool ? 1 : 0;

  cache->frames = frames;
  cache->kp_in = kp_in;
  cache->proprio_in = proprio;

  // Proprio MLP: 2d relu, 2d relu, d tanh.
  linear_forward(proprio, params.at(key("tok.ee0.w")), params.at(key("tok.ee0.b")),
                 &cache->ee_pre0);
  cache->ee_act0 = cache->ee_pre0.cwiseMax(0.0);
  linear_forward(cache->ee_act0, params.at(key("tok.ee1.w")),
                 params.at(key("tok.ee1.b")), &cache->ee_pre1);
  cache->ee_act1 = cache->ee_pre1.cwiseMax(0.0);
  linear_forward(cache->ee_act1, params.at(key("tok.ee2.w")),
                 params.at(key("tok.ee2.b")), &cache->ee_pre2);
  const Mat ee_token = cache->ee_pre2.array().tanh();

  Mat kp_tokens;
  linear_forward(kp_in, params.at(key("tok.kp.w")), params.at(key("tok.kp.b")),
                 &kp_tokens);

  Mat x(frames * n_tok, d);
  for (int f = 0; f < frames; ++f) {
    if (cfg_.class_maxpool) x.row(f * n_tok) = params.at(key("cls")).row(0);
    for (int k = 0; k < kk; ++k) {
      x.row(f * n_tok + base + k) = kp_tokens.row(f * kk + k) + positional.row(k);
    }
    x.row(f * n_tok + base + kk) = ee_token.row(f) + positional.row(kk);
  }

  cache->layers.resize(cfg_.n_layers);
  const int heads = cfg_.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < cfg_.n_layers; ++l) {
    EncoderLayerCache& lc = cache->layers[l];
    const std::string lp = "enc" + std::to_string(l) + ".";
    lc.x_in = x;

    Mat normed;
    layer_norm_forward(x, params.at(key(lp + "ln1.g")), params.at(key(lp + "ln1.b")),
                       &lc.xhat1, &lc.inv_std1, &normed);
    linear_forward(normed, params.at(key(lp + "wq.w")), params.at(key(lp + "wq.b")),
                   &lc.q);
    linear_forward(normed, params.at(key(lp + "wk.w")), params.at(key(lp + "wk.b")),
                   &lc.k);
    linear_forward(normed, params.at(key(lp + "wv.w")), params.at(key(lp + "wv.b")),
                   &lc.v);

    lc.probs.resize(frames * heads * n_tok, n_tok);
    lc.attn_concat.resize(frames * n_tok, d);
    for (int f = 0; f < frames; ++f) {
      const auto q = lc.q.middleRows(f * n_tok, n_tok);
      const auto kmat = lc.k.middleRows(f * n_tok, n_tok);
      const auto vmat = lc.v.middleRows(f * n_tok, n_tok);
      for (int h = 0; h < heads; ++h) {
        Mat s = q.middleCols(h * dh, dh) * kmat.middleCols(h * dh, dh).transpose();
        s *= scale;
        for (int r = 0; r < n_tok; ++r) {
          const double mx = s.row(r).maxCoeff();
          s.row(r) = (s.row(r).array() - mx).exp();
          s.row(r) /= s.row(r).sum();
        }
        lc.probs.middleRows((f * heads + h) * n_tok, n_tok) = s;
        lc.attn_concat.block(f * n_tok, h * dh, n_tok, dh).noalias() =
            s * vmat.middleCols(h * dh, dh);
      }
    }

    Mat attn_out;
    linear_forward(lc.attn_concat, params.at(key(lp + "wo.w")),
                   params.at(key(lp + "wo.b")), &attn_out);
    lc.x_mid = x + attn_out;

    layer_norm_forward(lc.x_mid, params.at(key(lp + "ln2.g")),
                       params.at(key(lp + "ln2.b")), &lc.xhat2, &lc.inv_std2,
                       &normed);
    linear_forward(normed, params.at(key(lp + "ff1.w")), params.at(key(lp + "ff1.b")),
                   &lc.ff_pre);
    gelu_forward(lc.ff_pre, &lc.ff_act);
    Mat ff_out;
    linear_forward(lc.ff_act, params.at(key(lp + "ff2.w")), params.at(key(lp + "ff2.b")),
                   &ff_out);
    x = lc.x_mid + ff_out;
  }
  cache->x_out = x;

  Mat pooled(frames, d);
  if (!cfg_.class_maxpool) {
    for (int f = 0; f < frames; ++f) {
      pooled.row(f) = x.middleRows(f * n_tok, n_tok).colwise().mean();
    }
  } else {
    cache->max_index.assign(static_cast<std::size_t>(frames) * d, 0);
    cache->pool_concat.resize(frames, 2 * d);
    for (int f = 0; f < frames; ++f) {
      cache->pool_concat.block(f, 0, 1, d) = x.row(f * n_tok);
      for (int c = 0; c < d; ++c) {
        int arg = 1;
        double best = x(f * n_tok + 1, c);
        for (int r = 2; r < n_tok; ++r) {
          const double val = x(f * n_tok + r, c);
          if (val > best) {
            best = val;
            arg = r;
          }
        }
        cache->pool_concat(f, d + c) = best;
        cache->max_index[static_cast<std::size_t>(f) * d + c] = arg;
      }
    }
    linear_forward(cache->pool_concat, params.at(key("pool.w")),
                   params.at(key("pool.b")), &pooled);
  }
  return pooled;
}

void TransformerEncoder::backward(const ParamSet& params, const EncoderCache& cache,
                                  const Mat& d_out, ParamSet* grads, Mat* d_kp_in,
                                  Mat* d_proprio) const {
  const int d = cfg_.d_model;
  const int kk = cfg_.keypoint_slots;
  const int frames = cache.frames;
  const int n_tok = cfg_.tokens_per_frame();
  const int base = cfg_.class_maxpool ? 1 : 0;
  const int heads = cfg_.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat d_x = Mat::Zero(frames * n_tok, d);
  if (!cfg_.class_maxpool) {
    for (int f = 0; f < frames; ++f) {
      for (int r = 0; r < n_tok; ++r) {
        d_x.row(f * n_tok + r) = d_out.row(f) / static_cast<double>(n_tok);
      }
    }
  } else {
    Mat d_concat;
    linear_backward(cache.pool_concat, params.at(key("pool.w")), d_out,
                    &grads->at(key("pool.w")), &grads->at(key("pool.b")), &d_concat);
    for (int f = 0; f < frames; ++f) {
      d_x.row(f * n_tok) += d_concat.block(f, 0, 1, d);
      for (int c = 0; c < d; ++c) {
        const int arg = cache.max_index[static_cast<std::size_t>(f) * d + c];
        d_x(f * n_tok + arg, c) += d_concat(f, d + c);
      }
    }
  }

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const EncoderLayerCache& lc = cache.layers[l];
    const std::string lp = "enc" + std::to_string(l) + ".";

    // Feed-forward branch.
    Mat d_ff_act;
    linear_backward(lc.ff_act, params.at(key(lp + "ff2.w")), d_x,
                    &grads->at(key(lp + "ff2.w")), &grads->at(key(lp + "ff2.b")),
                    &d_ff_act);
    gelu_backward_inplace(lc.ff_pre, &d_ff_act);
    Mat normed2 = lc.xhat2;
    for (int i = 0; i < normed2.rows(); ++i) {
      normed2.row(i) = lc.xhat2.row(i)
                           .cwiseProduct(params.at(key(lp + "ln2.g")).row(0)) +
                       params.at(key(lp + "ln2.b")).row(0);
    }
    Mat d_normed2;
    linear_backward(normed2, params.at(key(lp + "ff1.w")), d_ff_act,
                    &grads->at(key(lp + "ff1.w")), &grads->at(key(lp + "ff1.b")),
                    &d_normed2);
    Mat d_mid;
    layer_norm_backward(lc.xhat2, lc.inv_std2, params.at(key(lp + "ln2.g")),
                        d_normed2, &grads->at(key(lp + "ln2.g")),
                        &grads->at(key(lp + "ln2.b")), &d_mid);
    d_mid += d_x;  // residual

    // Attention branch.
    Mat d_attn_concat;
    linear_backward(lc.attn_concat, params.at(key(lp + "wo.w")), d_mid,
                    &grads->at(key(lp + "wo.w")), &grads->at(key(lp + "wo.b")),
                    &d_attn_concat);

    Mat d_q = Mat::Zero(frames * n_tok, d);
    Mat d_k = Mat::Zero(frames * n_tok, d);
    Mat d_v = Mat::Zero(frames * n_tok, d);
    for (int f = 0; f < frames; ++f) {
      for (int h = 0; h < heads; ++h) {
        const auto probs = lc.probs.middleRows((f * heads + h) * n_tok, n_tok);
        const auto d_oh = d_attn_concat.block(f * n_tok, h * dh, n_tok, dh);
        const auto vh = lc.v.block(f * n_tok, h * dh, n_tok, dh);
        const auto qh = lc.q.block(f * n_tok, h * dh, n_tok, dh);
        const auto kh = lc.k.block(f * n_tok, h * dh, n_tok, dh);

        Mat d_probs = d_oh * vh.transpose();
        d_v.block(f * n_tok, h * dh, n_tok, dh).noalias() = probs.transpose() * d_oh;
        Mat d_s(n_tok, n_tok);
        for (int r = 0; r < n_tok; ++r) {
          const double dot = d_probs.row(r).dot(probs.row(r));
          d_s.row(r) =
              (probs.row(r).array() * (d_probs.row(r).array() - dot)).matrix();
        }
        d_s *= scale;
        d_q.block(f * n_tok, h * dh, n_tok, dh).noalias() = d_s * kh;
        d_k.block(f * n_tok, h * dh, n_tok, dh).noalias() = d_s.transpose() * qh;
      }
    }

    Mat normed1 = lc.xhat1;
    for (int i = 0; i < normed1.rows(); ++i) {
      normed1.row(i) = lc.xhat1.row(i)
                           .cwiseProduct(params.at(key(lp + "ln1.g")).row(0)) +
                       params.at(key(lp + "ln1.b")).row(0);
    }
    Mat d_normed1, tmp;
    linear_backward(normed1, params.at(key(lp + "wq.w")), d_q,
                    &grads->at(key(lp + "wq.w")), &grads->at(key(lp + "wq.b")),
                    &d_normed1);
    linear_backward(normed1, params.at(key(lp + "wk.w")), d_k,
                    &grads->at(key(lp + "wk.w")), &grads->at(key(lp + "wk.b")),
                    &tmp);
    d_normed1 += tmp;
    linear_backward(normed1, params.at(key(lp + "wv.w")), d_v,
                    &grads->at(key(lp + "wv.w")), &grads->at(key(lp + "wv.b")),
                    &tmp);
    d_normed1 += tmp;

    Mat d_in;
    layer_norm_backward(lc.xhat1, lc.inv_std1, params.at(key(lp + "ln1.g")),
                        d_normed1, &grads->at(key(lp + "ln1.g")),
                        &grads->at(key(lp + "ln1.b")), &d_in);
    d_x = d_mid + d_in;  // residual into the layer input
  }

  // Token assembly backward.
  Mat d_kp_tokens(frames * kk, d);
  Mat d_ee_token(frames, d);
  for (int f = 0; f < frames; ++f) {
    if (cfg_.class_maxpool) {
      grads->at(key("cls")).row(0) += d_x.row(f * n_tok);
    }
    for (int k = 0; k < kk; ++k) {
      d_kp_tokens.row(f * kk + k) = d_x.row(f * n_tok + base + k);
    }
    d_ee_token.row(f) = d_x.row(f * n_tok + base + kk);
  }

  Mat d_kp_local;
  linear_backward(cache.kp_in, params.at(key("tok.kp.w")), d_kp_tokens,
                  &grads->at(key("tok.kp.w")), &grads->at(key("tok.kp.b")),
                  d_kp_in != nullptr ? d_kp_in : &d_kp_local);

  // tanh backward, then the two relu linears.
  Mat d_pre2 =
      d_ee_token.cwiseProduct((1.0 - cache.ee_pre2.array().tanh().square()).matrix());
  Mat d_act1;
  linear_backward(cache.ee_act1, params.at(key("tok.ee2.w")), d_pre2,
                  &grads->at(key("tok.ee2.w")), &grads->at(key("tok.ee2.b")),
                  &d_act1);
  Mat d_pre1 = d_act1.cwiseProduct(
      (cache.ee_pre1.array() > 0.0).cast<double>().matrix());
  Mat d_act0;
  linear_backward(cache.ee_act0, params.at(key("tok.ee1.w")), d_pre1,
                  &grads->at(key("tok.ee1.w")), &grads->at(key("tok.ee1.b")),
                  &d_act0);
  Mat d_pre0 = d_act0.cwiseProduct(
      (cache.ee_pre0.array() > 0.0).cast<double>().matrix());
  Mat d_proprio_local;
  linear_backward(cache.proprio_in, params.at(key("tok.ee0.w")), d_pre0,
                  &grads->at(key("tok.ee0.w")), &grads->at(key("tok.ee0.b")),
                  d_proprio != nullptr ? d_proprio : &d_proprio_local);
}

Denoiser::Denoiser(const DenoiserConfig& cfg, const std::string& prefix,
                   ParamSet* params, Rng* init_rng)
    : cfg_(cfg), prefix_(prefix) {
  t_table_ = sincos_embed(cfg.t_embed_dim, cfg.train_steps);
  auto linear = [&](const std::string& name, int rows, int cols) {
    Mat& w = params->add(key(name + ".w"), rows, cols);
    init_linear(w, *init_rng);
    params->add(key(name + ".b"), 1, cols);
  };
  linear("l1", cfg.input_dim(), cfg.hidden);
  linear("l2", cfg.hidden, cfg.hidden);
  linear("l3", cfg.hidden, cfg.hidden);
  linear("l4", cfg.hidden, cfg.x_dim);
}

Mat Denoiser::forward(const ParamSet& params, const Mat& x,
                      const std::vector<int>& t, const Mat& cond,
                      DenoiserCache* cache) const {
  const int batch = static_cast<int>(x.rows());
  require(x.cols() == cfg_.x_dim && cond.cols() == cfg_.cond_dim &&
              cond.rows() == batch && static_cast<int>(t.size()) == batch,
          "shape", "denoiser input shapes disagree");

  cache->input.resize(batch, cfg_.input_dim());
  for (int i = 0; i < batch; ++i) {
    require(t[i] >= 0 && t[i] < cfg_.train_steps, "invalid-timestep",
            "timestep out of range");
    cache->input.block(i, 0, 1, cfg_.x_dim) = x.row(i);
    cache->input.block(i, cfg_.x_dim, 1, cfg_.t_embed_dim) = t_table_.row(t[i]);
    cache->input.block(i, cfg_.x_dim + cfg_.t_embed_dim, 1, cfg_.cond_dim) =
        cond.row(i);
  }

  linear_forward(cache->input, params.at(key("l1.w")), params.at(key("l1.b")),
                 &cache->pre1);
  gelu_forward(cache->pre1, &cache->act1);
  linear_forward(cache->act1, params.at(key("l2.w")), params.at(key("l2.b")),
                 &cache->pre2);
  Mat g2;
  gelu_forward(cache->pre2, &g2);
  cache->h2 = cache->act1 + g2;
  linear_forward(cache->h2, params.at(key("l3.w")), params.at(key("l3.b")),
                 &cache->pre3);
  Mat g3;
  gelu_forward(cache->pre3, &g3);
  cache->h3 = cache->h2 + g3;
  Mat out;
  linear_forward(cache->h3, params.at(key("l4.w")), params.at(key("l4.b")), &out);
  return out;
}

void Denoiser::backward(const ParamSet& params, const DenoiserCache& cache,
                        const Mat& d_out, ParamSet* grads, Mat* d_x,
                        Mat* d_cond) const {
  Mat d_h3;
  linear_backward(cache.h3, params.at(key("l4.w")), d_out, &grads->at(key("l4.w")),
                  &grads->at(key("l4.b")), &d_h3);
  Mat d_g3 = d_h3;
  gelu_backward_inplace(cache.pre3, &d_g3);
  Mat d_h2;
  linear_backward(cache.h2, params.at(key("l3.w")), d_g3, &grads->at(key("l3.w")),
                  &grads->at(key("l3.b")), &d_h2);
  d_h2 += d_h3;  // residual
  Mat d_g2 = d_h2;
  gelu_backward_inplace(cache.pre2, &d_g2);
  Mat d_act1;
  linear_backward(cache.act1, params.at(key("l2.w")), d_g2, &grads->at(key("l2.w")),
                  &grads->at(key("l2.b")), &d_act1);
  d_act1 += d_h2;  // residual
  gelu_backward_inplace(cache.pre1, &d_act1);
  Mat d_input;
  linear_backward(cache.input, params.at(key("l1.w")), d_act1,
                  &grads->at(key("l1.w")), &grads->at(key("l1.b")), &d_input);
  if (d_x != nullptr) *d_x = d_input.leftCols(cfg_.x_dim);
  if (d_cond != nullptr) *d_cond = d_input.rightCols(cfg_.cond_dim);
}

AdamW::AdamW(const ParamSet& params)
    : m(params.zeros_like()), v(params.zeros_like()) {}

void AdamW::update(ParamSet* params, const ParamSet& grads, double lr,
                   double weight_decay) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  auto mi = m.tensors.begin();
  auto vi = v.tensors.begin();
  auto gi = grads.tensors.begin();
  for (auto& [name, theta] : params->tensors) {
    Mat& mm = mi->second;
    Mat& vv = vi->second;
    const Mat& g = gi->second;
    mm = beta1 * mm + (1.0 - beta1) * g;
    vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
    const Mat m_hat = mm / bc1;
    const Mat v_hat = vv / bc2;
    theta -= lr * (m_hat.array() / (v_hat.array().sqrt() + epsilon) +
                   weight_decay * theta.array())
                 .matrix();
    ++mi;
    ++vi;
    ++gi;
  }
}

}  // namespace kil::nn
