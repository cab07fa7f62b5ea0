#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hierpath/autodiff.hpp"

namespace hierpath {

/// Seeded orthogonal matrix: QR of a Gaussian sample with R's diagonal made
/// positive. Columns are orthonormal when rows ≥ cols, rows otherwise.
Tensor orthogonal_init(std::size_t rows, std::size_t cols, std::uint64_t seed);

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

/// One LSTM cell. Gate blocks are stacked as (input, forget, output,
/// candidate), each H rows.
struct LstmParams {
  std::size_t input_size = 0;
  std::size_t hidden = 0;
  Tensor w_input;   // 4H × input_size
  Tensor w_hidden;  // 4H × H
  Tensor bias;      // 4H

  static LstmParams create(std::size_t input_size, std::size_t hidden, std::uint64_t seed);
  static LstmParams zeros(std::size_t input_size, std::size_t hidden);
  void append_parameters(const std::string& prefix, NamedParams& out);
};

struct LstmState {
  Var h;
  Var c;
};

LstmState zero_state(Tape& tape, std::size_t hidden);
LstmState lstm_step(Tape& tape, const LstmParams& params, Var input, const LstmState& prev);

struct BiLstmLayer {
  LstmParams forward;
  LstmParams backward;
};

/// Per-step concatenations [h_fwd_t; h_bwd_t], plus each direction's state
/// after consuming the whole sequence (forward at T, backward at 1).
struct BiLstmOutput {
  std::vector<Var> states;
  LstmState final_forward;
  LstmState final_backward;
};

BiLstmOutput bilstm_forward(Tape& tape, const BiLstmLayer& layer, std::span<const Var> inputs);

/// Stacked bidirectional LSTM with output projection θ_o and an optional
/// residual arc (fixed alignment p→N plus trainable ξ: N→N).
struct RnnStack {
  std::vector<BiLstmLayer> layers;
  Tensor proj_w;  // N × 2H
  Tensor proj_b;  // N
  bool residual = false;
  Tensor align;   // N × p, never trained
  Tensor xi;      // N × N

  static RnnStack create(std::size_t input_size, std::size_t hidden, std::size_t num_layers,
                         std::size_t num_classes, bool residual, std::uint64_t seed);
  void append_parameters(const std::string& prefix, NamedParams& out);
};

struct RnnOutput {
  std::vector<Var> outputs;  // o_1..o_T, residual-adjusted when enabled
  std::vector<Var> raw;      // o_1..o_T before the residual arc
  std::vector<Var> top_states;
};

RnnOutput rnn_forward(Tape& tape, const RnnStack& stack, std::span<const Var> inputs);

/// align·u_t + ξ·o_t.
Var residual_output(Var u, Var o, Var align, Var xi);

/// Encoder (stacked bidirectional LSTM, no projection) and a unidirectional
/// decoder fed with the previous step's output vector.
struct Seq2SeqParams {
  std::vector<BiLstmLayer> encoder;
  Tensor reduce_w;  // Hd × 2He
  Tensor reduce_b;  // Hd
  Tensor feed_w;    // E × N
  LstmParams decoder;
  Tensor out_w;  // N × Hd
  Tensor out_b;  // N

  static Seq2SeqParams create(std::size_t input_size, std::size_t encoder_hidden,
                              std::size_t encoder_layers, std::size_t decoder_hidden,
                              std::size_t embedding, std::size_t num_classes,
                              std::uint64_t seed);
  std::size_t num_classes() const { return out_b.size(); }
  void append_parameters(const std::string& prefix, NamedParams& out);
};

/// h̄_0 = reduce([h_fwd_T; h_bwd_1]) of the last encoder layer; c̄_0 = 0.
LstmState s2s_encode(Tape& tape, const Seq2SeqParams& params, std::span<const Var> inputs);

struct DecodeStep {
  Var output;
  LstmState state;
};

DecodeStep s2s_decode_step(Tape& tape, const Seq2SeqParams& params, Var prev_output,
                           const LstmState& state);

}  // namespace hierpath
