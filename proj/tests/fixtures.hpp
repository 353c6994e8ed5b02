#pragma once

// Tiny on-disk student/teacher/dataset triple for exercising the training plumbing.

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "opdlab/checkpoint.hpp"
#include "opdlab/runner.hpp"

namespace testsupport {

inline opdlab::ModelConfig tiny_config(std::uint64_t seed) {
  opdlab::ModelConfig c;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.seed = seed;
  return c;
}

struct TinyFixture {
  std::filesystem::path student, teacher, dataset;
};

inline TinyFixture write_tiny_fixture(const std::filesystem::path& dir) {
  TinyFixture f{dir / "student", dir / "teacher", dir / "train.jsonl"};
  opdlab::save_checkpoint(opdlab::PolicyModel(tiny_config(1)), {}, f.student);
  opdlab::PolicyModel teacher(tiny_config(2));
  teacher.freeze();
  opdlab::save_checkpoint(teacher, {}, f.teacher);
  opdlab::tasks::save_dataset(f.dataset, opdlab::tasks::gen_dataset(opdlab::tasks::TaskSpec{}, 50));
  return f;
}

// Small enough that a step takes a few milliseconds.
inline opdlab::runner::TrainConfig tiny_train_config(const TinyFixture& f, opdlab::algos::Algo algo, int steps) {
  opdlab::runner::TrainConfig c;
  c.algo = algo;
  c.steps = steps;
  c.group_size = 4;
  c.prompts_per_step = 2;
  c.max_new_tokens = 6;
  c.student = f.student.string();
  c.teacher = f.teacher.string();
  c.dataset = f.dataset.string();
  return c;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testsupport
