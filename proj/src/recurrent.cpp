#include "hierpath/recurrent.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "hierpath/error.hpp"
#include "hierpath/random.hpp"

namespace hierpath {

Tensor orthogonal_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw UsageError("orthogonal_init needs positive extents");
  const bool tall = rows >= cols;
  const auto big = static_cast<Eigen::Index>(tall ? rows : cols);
  const auto small = static_cast<Eigen::Index>(tall ? cols : rows);
  const Tensor sample = gaussian_tensor(Shape{static_cast<std::size_t>(big),
                                              static_cast<std::size_t>(small)},
                                        1.0, seed);
  Eigen::MatrixXd a(big, small);
  for (Eigen::Index i = 0; i < big; ++i) {
    for (Eigen::Index j = 0; j < small; ++j) {
      a(i, j) = sample[static_cast<std::size_t>(i * small + j)];
    }
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR();
  for (Eigen::Index j = 0; j < small; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = tall ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                               : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    }
  }
  return out;
}

namespace {

/// Stacks per-gate orthogonal blocks into a (4·hidden) × cols matrix.
Tensor stacked_orthogonal(std::size_t hidden, std::size_t cols, std::uint64_t seed) {
  Tensor out(Shape{4 * hidden, cols});
  for (std::size_t g = 0; g < 4; ++g) {
    const Tensor block = orthogonal_init(hidden, cols, mix_seed(seed, g));
    std::copy(block.values().begin(), block.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(g * hidden * cols));
  }
  return out;
}

void trainable(std::initializer_list<Tensor*> tensors) {
  for (Tensor* t : tensors) t->set_requires_grad(true);
}

}  // namespace

LstmParams LstmParams::create(std::size_t input_size, std::size_t hidden, std::uint64_t seed) {
  LstmParams p;
  p.input_size = input_size;
  p.hidden = hidden;
  p.w_input = stacked_orthogonal(hidden, input_size, mix_seed(seed, 1));
  p.w_hidden = stacked_orthogonal(hidden, hidden, mix_seed(seed, 2));
  p.bias = Tensor(Shape{4 * hidden});
  for (std::size_t i = hidden; i < 2 * hidden; ++i) p.bias[i] = 1.0;  // forget gate
  trainable({&p.w_input, &p.w_hidden, &p.bias});
  return p;
}

LstmParams LstmParams::zeros(std::size_t input_size, std::size_t hidden) {
  LstmParams p;
  p.input_size = input_size;
  p.hidden = hidden;
  p.w_input = Tensor(Shape{4 * hidden, input_size});
  p.w_hidden = Tensor(Shape{4 * hidden, hidden});
  p.bias = Tensor(Shape{4 * hidden});
  trainable({&p.w_input, &p.w_hidden, &p.bias});
  return p;
}

void LstmParams::append_parameters(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w_input", &w_input);
  out.emplace_back(prefix + ".w_hidden", &w_hidden);
  out.emplace_back(prefix + ".bias", &bias);
}

LstmState zero_state(Tape& tape, std::size_t hidden) {
  return {tape.constant(Tensor(Shape{hidden})), tape.constant(Tensor(Shape{hidden}))};
}

LstmState lstm_step(Tape& tape, const LstmParams& params, Var input, const LstmState& prev) {
  if (input.shape() != Shape{params.input_size}) {
    throw DimensionError("LSTM input " + shape_string(input.shape()) + ", expected (" +
                         std::to_string(params.input_size) + ")");
  }
  const std::size_t H = params.hidden;
  Var b = tape.parameter(params.bias);
  Var gates = add(linear(tape.parameter(params.w_input), input, &b),
                  linear(tape.parameter(params.w_hidden), prev.h));
  Var i = sigmoid(slice(gates, 0, H));
  Var f = sigmoid(slice(gates, H, H));
  Var o = sigmoid(slice(gates, 2 * H, H));
  Var g = tanh(slice(gates, 3 * H, H));
  Var c = add(mul(f, prev.c), mul(i, g));
  Var h = mul(o, tanh(c));
  return {h, c};
}

BiLstmOutput bilstm_forward(Tape& tape, const BiLstmLayer& layer, std::span<const Var> inputs) {
  if (inputs.empty()) throw DimensionError("recurrent layer needs at least one step");
  const std::size_t T = inputs.size();
  std::vector<Var> fwd(T), bwd(T);
  LstmState state = zero_state(tape, layer.forward.hidden);
  for (std::size_t t = 0; t < T; ++t) {
    state = lstm_step(tape, layer.forward, inputs[t], state);
    fwd[t] = state.h;
  }
  BiLstmOutput out;
  out.final_forward = state;
  state = zero_state(tape, layer.backward.hidden);
  for (std::size_t t = T; t-- > 0;) {
    state = lstm_step(tape, layer.backward, inputs[t], state);
    bwd[t] = state.h;
  }
  out.final_backward = state;
  out.states.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Var pair[] = {fwd[t], bwd[t]};
    out.states.push_back(concat(pair));
  }
  return out;
}

namespace {

std::vector<BiLstmLayer> make_layers(std::size_t input_size, std::size_t hidden,
                                     std::size_t num_layers, std::uint64_t seed) {
  if (num_layers == 0) throw ConfigError("recurrent stack needs at least one layer");
  std::vector<BiLstmLayer> layers;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t in = l == 0 ? input_size : 2 * hidden;
    layers.push_back({LstmParams::create(in, hidden, mix_seed(seed, 2 * l)),
                      LstmParams::create(in, hidden, mix_seed(seed, 2 * l + 1))});
  }
  return layers;
}

void append_layers(const std::string& prefix, std::vector<BiLstmLayer>& layers,
                   NamedParams& out) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].forward.append_parameters(prefix + ".layer" + std::to_string(l) + ".fwd", out);
    layers[l].backward.append_parameters(prefix + ".layer" + std::to_string(l) + ".bwd", out);
  }
}

}  // namespace

RnnStack RnnStack::create(std::size_t input_size, std::size_t hidden, std::size_t num_layers,
                          std::size_t num_classes, bool residual, std::uint64_t seed) {
  RnnStack s;
  s.layers = make_layers(input_size, hidden, num_layers, mix_seed(seed, 1));
  s.proj_w = orthogonal_init(num_classes, 2 * hidden, mix_seed(seed, 2));
  s.proj_b = Tensor(Shape{num_classes});
  trainable({&s.proj_w, &s.proj_b});
  s.residual = residual;
  if (residual) {
    s.align = gaussian_tensor(Shape{num_classes, input_size},
                              1.0 / std::sqrt(static_cast<double>(input_size)),
                              mix_seed(seed, 3));
    s.xi = Tensor::identity(num_classes);
    s.xi.set_requires_grad(true);
  }
  return s;
}

void RnnStack::append_parameters(const std::string& prefix, NamedParams& out) {
  append_layers(prefix, layers, out);
  out.emplace_back(prefix + ".proj_w", &proj_w);
  out.emplace_back(prefix + ".proj_b", &proj_b);
  if (residual) {
    out.emplace_back(prefix + ".align", &align);
    out.emplace_back(prefix + ".xi", &xi);
  }
}

Var residual_output(Var u, Var o, Var align, Var xi) {
  const auto& a = align.shape();
  if (a.size() != 2 || a[1] != u.size() || a[0] != o.size()) {
    throw DimensionError("residual alignment " + shape_string(a) + " cannot map u " +
                         shape_string(u.shape()) + " onto o " + shape_string(o.shape()));
  }
  return add(matmul(align, u), matmul(xi, o));
}

RnnOutput rnn_forward(Tape& tape, const RnnStack& stack, std::span<const Var> inputs) {
  if (inputs.empty()) throw DimensionError("rnn_forward needs T ≥ 1 inputs");
  const std::size_t p = stack.layers.front().forward.input_size;
  for (const Var& u : inputs) {
    if (u.shape() != Shape{p}) {
      throw DimensionError("recurrent input " + shape_string(u.shape()) + ", expected (" +
                           std::to_string(p) + ")");
    }
  }
  std::vector<Var> current(inputs.begin(), inputs.end());
  for (const auto& layer : stack.layers) current = bilstm_forward(tape, layer, current).states;
  RnnOutput out;
  out.top_states = current;
  Var pw = tape.parameter(stack.proj_w);
  Var pb = tape.parameter(stack.proj_b);
  for (std::size_t t = 0; t < current.size(); ++t) {
    Var o = linear(pw, current[t], &pb);
    out.raw.push_back(o);
    if (stack.residual) {
      o = residual_output(inputs[t], o, tape.parameter(stack.align), tape.parameter(stack.xi));
    }
    out.outputs.push_back(o);
  }
  return out;
}

Seq2SeqParams Seq2SeqParams::create(std::size_t input_size, std::size_t encoder_hidden,
                                    std::size_t encoder_layers, std::size_t decoder_hidden,
                                    std::size_t embedding, std::size_t num_classes,
                                    std::uint64_t seed) {
  Seq2SeqParams s;
  s.encoder = make_layers(input_size, encoder_hidden, encoder_layers, mix_seed(seed, 1));
  s.reduce_w = orthogonal_init(decoder_hidden, 2 * encoder_hidden, mix_seed(seed, 2));
  s.reduce_b = Tensor(Shape{decoder_hidden});
  s.feed_w = orthogonal_init(embedding, num_classes, mix_seed(seed, 3));
  s.decoder = LstmParams::create(embedding, decoder_hidden, mix_seed(seed, 4));
  s.out_w = orthogonal_init(num_classes, decoder_hidden, mix_seed(seed, 5));
  s.out_b = Tensor(Shape{num_classes});
  trainable({&s.reduce_w, &s.reduce_b, &s.feed_w, &s.out_w, &s.out_b});
  return s;
}

void Seq2SeqParams::append_parameters(const std::string& prefix, NamedParams& out) {
  append_layers(prefix + ".encoder", encoder, out);
  out.emplace_back(prefix + ".reduce_w", &reduce_w);
  out.emplace_back(prefix + ".reduce_b", &reduce_b);
  out.emplace_back(prefix + ".feed_w", &feed_w);
  decoder.append_parameters(prefix + ".decoder", out);
  out.emplace_back(prefix + ".out_w", &out_w);
  out.emplace_back(prefix + ".out_b", &out_b);
}

LstmState s2s_encode(Tape& tape, const Seq2SeqParams& params, std::span<const Var> inputs) {
  if (inputs.empty()) throw DimensionError("s2s_encode needs T ≥ 1 inputs");
  std::vector<Var> current(inputs.begin(), inputs.end());
  BiLstmOutput last;
  for (const auto& layer : params.encoder) {
    last = bilstm_forward(tape, layer, current);
    current = last.states;
  }
  Var parts[] = {last.final_forward.h, last.final_backward.h};
  Var rb = tape.parameter(params.reduce_b);
  Var h0 = linear(tape.parameter(params.reduce_w), concat(parts), &rb);
  return {h0, tape.constant(Tensor(Shape{params.decoder.hidden}))};
}

DecodeStep s2s_decode_step(Tape& tape, const Seq2SeqParams& params, Var prev_output,
                           const LstmState& state) {
  if (prev_output.shape() != Shape{params.num_classes()}) {
    throw DimensionError("decoder feedback " + shape_string(prev_output.shape()) +
                         ", expected (" + std::to_string(params.num_classes()) + ")");
  }
  if (state.h.shape() != Shape{params.decoder.hidden}) {
    throw DimensionError("decoder state " + shape_string(state.h.shape()) + ", expected (" +
                         std::to_string(params.decoder.hidden) + ")");
  }
  Var embedded = linear(tape.parameter(params.feed_w), prev_output);
  LstmState next = lstm_step(tape, params.decoder, embedded, state);
  Var ob = tape.parameter(params.out_b);
  return {linear(tape.parameter(params.out_w), next.h, &ob), next};
}

}  // namespace hierpath
