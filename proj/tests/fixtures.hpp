#pragma once

#include "rpp/config.hpp"
#include "rpp/encoder.hpp"
#include "rpp/synthdata.hpp"
#include "rpp/teacher.hpp"
#include "rpp/trainer.hpp"

namespace fixtures {

inline rpp::SynthSpec small_spec(std::uint64_t seed = 7) {
  rpp::SynthSpec s;
  s.classes = 8;
  s.grid_h = 2;
  s.grid_w = 2;
  s.patch_vocab = 8;
  s.name_len = 2;
  s.text_vocab = 16;
  s.train_per_class = 4;
  s.val_per_class = 2;
  s.transfer_classes = 4;
  s.transfer_per_class = 2;
  s.seed = seed;
  return s;
}

inline rpp::EncoderConfig small_encoder(const rpp::SynthSpec& s) {
  rpp::EncoderConfig e;
  e.depth = 2;
  e.dim = 8;
  e.heads = 2;
  e.embed_dim = 8;
  e.prompt_len = 2;
  e.replace_layers = {2};
  e.grid_h = s.grid_h;
  e.grid_w = s.grid_w;
  e.patch_vocab = s.patch_vocab;
  e.text_vocab = s.text_vocab;
  e.name_len = s.name_len;
  return e;
}

inline rpp::TeacherConfig small_teacher(const rpp::SynthSpec& s) {
  rpp::TeacherConfig t;
  t.encoder = small_encoder(s);
  t.encoder.prompt_len = 0;
  t.encoder.replace_layers = {};
  t.encoder.text_prefix_len = 1;
  t.templates = 2;
  t.max_epochs = 2;
  t.seed = 11;
  return t;
}

inline rpp::TrainConfig small_train() {
  rpp::TrainConfig t;
  t.epochs = 2;
  t.batch_size = 4;
  t.k = 4;
  t.seed = 5;
  return t;
}

inline rpp::DualEncoder small_student(const rpp::SynthSpec& s, std::uint64_t seed = 3) {
  const rpp::EncoderConfig e = small_encoder(s);
  std::mt19937_64 rng(seed);
  rpp::Backbone bb = rpp::Backbone::init(e, rng);
  bb.set_trainable(false);
  return rpp::DualEncoder(e, std::move(bb));
}

}  // namespace fixtures
