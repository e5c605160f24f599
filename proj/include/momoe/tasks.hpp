#pragma once

// Synthetic token corpus and token corruption.
//
// The corpus is an order-2 Markov chain over ids 0..V-2 (V-1 is reserved
// as the sentinel). Every token a has four successor candidates; which
// weights they get depends on the token before a, so both the current and
// the previous token carry information about the next one.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "momoe/tensor.hpp"

namespace momoe {

using Sequence = std::vector<std::size_t>;

struct TinyCorpus {
  std::size_t vocab = 128;
  std::vector<Sequence> train;
  std::vector<Sequence> valid;

  std::size_t sentinel() const { return vocab - 1; }
};

struct CorpusSpec {
  std::size_t vocab = 128;
  std::size_t seq_len = 64;
  std::size_t train_sequences = 48;
  std::size_t valid_sequences = 16;
};

// Draw order: successor table, weight table, then train and valid
// sequences token by token.
inline TinyCorpus build_tiny_corpus(const CorpusSpec& spec, Rng& rng) {
  if (spec.vocab < 3 || spec.vocab > 256) throw ContractError("corpus: vocab must lie in [3, 256]");
  if (spec.seq_len < 2 || spec.seq_len > 64) throw ContractError("corpus: seq_len must lie in [2, 64]");
  constexpr std::size_t kSucc = 4, kPhases = 4;
  const std::size_t n = spec.vocab - 1;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::array<std::size_t, kSucc>> succ(n);
  for (auto& s : succ)
    for (auto& v : s) v = pick(rng);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<std::array<double, kSucc>> weights(kPhases);
  for (auto& w : weights) {
    double total = 0.0;
    for (auto& v : w) {
      v = -std::log(1.0 - u01(rng));  // exponential draws give a flat Dirichlet
      total += v;
    }
    for (auto& v : w) v /= total;
  }

  auto sample = [&](std::size_t count) {
    std::vector<Sequence> out;
    for (std::size_t k = 0; k < count; ++k) {
      Sequence s;
      s.push_back(pick(rng));
      std::size_t prev = pick(rng);
      while (s.size() < spec.seq_len) {
        const std::size_t a = s.back();
        const auto& w = weights[prev % kPhases];
        double r = u01(rng), acc = 0.0;
        std::size_t j = 0;
        for (; j + 1 < kSucc; ++j) {
          acc += w[j];
          if (r < acc) break;
        }
        prev = a;
        s.push_back(succ[a][j]);
      }
      out.push_back(std::move(s));
    }
    return out;
  };

  TinyCorpus c;
  c.vocab = spec.vocab;
  c.train = sample(spec.train_sequences);
  c.valid = sample(spec.valid_sequences);
  return c;
}

// Entropy (nats) of the empirical unigram distribution of `seqs`.
inline double unigram_entropy(const std::vector<Sequence>& seqs) {
  std::map<std::size_t, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& s : seqs)
    for (auto t : s) {
      ++counts[t];
      ++total;
    }
  double h = 0.0;
  for (const auto& [tok, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

// Cross-entropy (nats) of predicting the targets of `seqs` with the unigram
// distribution estimated on `reference`; targets unseen in the reference get
// add-one smoothing over the vocabulary.
inline double unigram_cross_entropy(const std::vector<Sequence>& reference, const std::vector<Sequence>& seqs,
                                    std::size_t vocab) {
  std::vector<double> counts(vocab, 1.0);
  double total = static_cast<double>(vocab);
  for (const auto& s : reference)
    for (auto t : s) {
      counts.at(t) += 1.0;
      total += 1.0;
    }
  double loss = 0.0;
  std::size_t n = 0;
  for (const auto& s : seqs)
    for (std::size_t i = 1; i < s.size(); ++i) {
      loss -= std::log(counts.at(s[i]) / total);
      ++n;
    }
  return loss / static_cast<double>(n);
}

// Each token is independently replaced by `sentinel` with probability
// swap_rate. One uniform draw per token, in order.
inline std::vector<Sequence> corrupt_tokens(const std::vector<Sequence>& seqs, double swap_rate, std::size_t sentinel,
                                            std::uint64_t seed) {
  if (!(swap_rate >= 0.0 && swap_rate <= 1.0)) throw ContractError("corrupt_tokens: swap_rate must lie in [0, 1]");
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Sequence> out = seqs;
  for (auto& s : out)
    for (auto& t : s)
      if (u01(rng) < swap_rate) t = sentinel;
  return out;
}

}  // namespace momoe
