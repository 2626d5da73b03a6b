#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "xlkd/data.hpp"
#include "xlkd/errors.hpp"

namespace xlkd {

namespace {

struct Word {
  std::vector<std::string> syllables;
  std::string text() const {
    std::string s;
    for (const auto& y : syllables) s += y;
    return s;
  }
};

std::vector<std::string> syllable_set(std::string_view consonants) {
  std::vector<std::string> out;
  for (char c : consonants)
    for (char v : std::string_view("aeiou")) out.push_back(std::string{c, v});
  return out;
}

bool prefix_clash(const std::string& w, const std::set<std::string>& taken) {
  for (const auto& t : taken) {
    if (t.size() <= w.size() ? w.compare(0, t.size(), t) == 0 : t.compare(0, w.size(), w) == 0) return true;
  }
  return false;
}

// Prefix-free words so that greedy segmentation never prefers one whole word
// as the head of another.
std::vector<Word> make_words(std::size_t n, std::size_t min_syl, std::size_t max_syl,
                             const std::vector<std::string>& syllables, std::set<std::string>& taken,
                             std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(min_syl, max_syl), pick(0, syllables.size() - 1);
  std::vector<Word> out;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 100000) throw ContractError("synth_corpus: cannot generate enough distinct words");
    Word w;
    const std::size_t k = len(rng);
    for (std::size_t i = 0; i < k; ++i) w.syllables.push_back(syllables[pick(rng)]);
    const std::string text = w.text();
    if (prefix_clash(text, taken)) continue;
    taken.insert(text);
    out.push_back(std::move(w));
  }
  return out;
}

std::string cont(const std::string& s) { return std::string(kContinuationPrefix) + s; }

std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

SubwordVocab vocab_from(const std::set<std::string>& pieces) {
  std::vector<std::string> entries{std::string(kPadToken), std::string(kUnkToken), std::string(kClsToken),
                                   std::string(kSepToken)};
  entries.insert(entries.end(), pieces.begin(), pieces.end());
  return SubwordVocab(std::move(entries));
}

}  // namespace

SynthCorpus synth_corpus(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.pairs == 0 && spec.tasks == 0) throw ContractError("synth_corpus: nothing to generate");
  if (spec.english_words < 3 || spec.object_classes < spec.tags_per_image || spec.tags_per_image < 2 ||
      spec.regions_per_image < spec.tags_per_image || spec.min_words < 2 || spec.max_words < spec.min_words ||
      spec.feature_dim <= 0 || spec.annotations < 1) {
    throw ContractError("synth_corpus: inconsistent sizes");
  }
  if (spec.eligibility < 0.0 || spec.eligibility > 1.0) throw ContractError("synth_corpus: eligibility must be in [0, 1]");

  std::mt19937_64 rng(seed);
  const auto en_syl = syllable_set("bdfgklmnprst");
  const auto tg_syl = syllable_set("hjqvwxyz");

  std::set<std::string> en_taken, tg_taken;
  // The first two lexicon words open questions and select which tag is the answer.
  const auto lexicon = make_words(spec.english_words, 2, 3, en_syl, en_taken, rng);
  const auto classes = make_words(spec.object_classes, 3, 3, en_syl, en_taken, rng);
  const auto particles = make_words(2, 1, 1, tg_syl, tg_taken, rng);

  SynthCorpus corpus;
  std::set<std::string> teacher_pieces, student_pieces;

  // English sentence words: an ineligible word is whole for the teacher and
  // split per syllable for the student.
  std::vector<std::size_t> order(lexicon.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_inelig = static_cast<std::size_t>(std::llround((1.0 - spec.eligibility) * static_cast<double>(lexicon.size())));
  std::vector<bool> ineligible(lexicon.size(), false);
  for (std::size_t i = 0; i < n_inelig; ++i) ineligible[order[i]] = true;

  for (std::size_t i = 0; i < lexicon.size(); ++i) {
    const Word& w = lexicon[i];
    if (ineligible[i]) {
      teacher_pieces.insert(w.text());
      student_pieces.insert(w.syllables.front());
      for (std::size_t k = 1; k < w.syllables.size(); ++k) student_pieces.insert(cont(w.syllables[k]));
    } else if (i % 3 == 2) {
      std::string rest;
      for (std::size_t k = 1; k < w.syllables.size(); ++k) rest += w.syllables[k];
      for (auto* set : {&teacher_pieces, &student_pieces}) {
        set->insert(w.syllables.front());
        set->insert(cont(rest));
      }
    } else {
      teacher_pieces.insert(w.text());
      student_pieces.insert(w.text());
    }
  }
  // Object classes: even ones match fully, odd ones only on their first subword.
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const Word& w = classes[c];
    corpus.object_classes.push_back(w.text());
    if (c % 2 == 0) {
      teacher_pieces.insert(w.text());
      student_pieces.insert(w.text());
    } else {
      teacher_pieces.insert(w.syllables[0]);
      teacher_pieces.insert(cont(w.syllables[1] + w.syllables[2]));
      student_pieces.insert(w.syllables[0]);
      student_pieces.insert(cont(w.syllables[1]));
      student_pieces.insert(cont(w.syllables[2]));
    }
  }

  // Target-language dictionary, bijective over lexicon and classes.
  const auto tg_words = make_words(lexicon.size() + classes.size(), 2, 3, tg_syl, tg_taken, rng);
  for (std::size_t i = 0; i < lexicon.size(); ++i) corpus.dictionary[lexicon[i].text()] = tg_words[i].text();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    corpus.dictionary[classes[c].text()] = tg_words[lexicon.size() + c].text();
    corpus.answer_translations[classes[c].text()] = tg_words[lexicon.size() + c].text();
  }
  for (const auto& w : tg_words) student_pieces.insert(w.text());
  for (const auto& p : particles) student_pieces.insert(p.text());

  corpus.teacher_vocab = vocab_from(teacher_pieces);
  corpus.student_vocab = vocab_from(student_pieces);

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Matrix> prototypes;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    prototypes.push_back(Matrix(1, spec.feature_dim).unaryExpr([&](double) { return normal(rng); }));
  }

  std::uniform_int_distribution<std::size_t> len(spec.min_words, spec.max_words);
  std::uniform_int_distribution<std::size_t> word_pick(2, lexicon.size() - 1);
  std::uniform_int_distribution<std::size_t> class_pick(0, classes.size() - 1);
  std::uniform_int_distribution<std::size_t> type_pick(0, 1);
  std::bernoulli_distribution reorder(spec.reorder_rate), unaligned(spec.unaligned_rate);

  struct Image {
    std::vector<std::size_t> tag_classes;
    std::vector<std::string> tags, labels;
    Matrix features;
  };
  auto make_image = [&]() {
    Image img;
    std::vector<std::size_t> cls(classes.size());
    for (std::size_t c = 0; c < cls.size(); ++c) cls[c] = c;
    std::shuffle(cls.begin(), cls.end(), rng);
    img.tag_classes.assign(cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(spec.tags_per_image));
    img.features = Matrix(static_cast<Eigen::Index>(spec.regions_per_image), spec.feature_dim);
    for (std::size_t r = 0; r < spec.regions_per_image; ++r) {
      const std::size_t c = r < img.tag_classes.size() ? img.tag_classes[r] : class_pick(rng);
      img.labels.push_back(classes[c].text());
      img.features.row(static_cast<Eigen::Index>(r)) =
          prototypes[c] + spec.feature_noise * Matrix(1, spec.feature_dim).unaryExpr([&](double) { return normal(rng); });
    }
    for (auto c : img.tag_classes) img.tags.push_back(classes[c].text());
    return img;
  };

  struct Sentence {
    std::vector<std::string> en, tg;
    WordAlignment align;
    std::size_t type = 0;
  };
  auto make_sentence = [&]() {
    Sentence s;
    s.type = type_pick(rng);
    const std::size_t n = len(rng);
    s.en.push_back(lexicon[s.type].text());
    while (s.en.size() < n) s.en.push_back(lexicon[word_pick(rng)].text());
    // Target order starts as the identity and gets adjacent swaps; the
    // question word stays first.
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = 1; i + 1 < n; ++i) {
      if (reorder(rng)) {
        std::swap(perm[i], perm[i + 1]);
        ++i;
      }
    }
    for (std::size_t pos = 0; pos < n; ++pos) {
      s.align.add(perm[pos], s.tg.size());
      s.tg.push_back(corpus.dictionary.at(s.en[perm[pos]]));
      if (unaligned(rng)) s.tg.push_back(particles[s.tg.size() % particles.size()].text());
    }
    return s;
  };
  auto answers_for = [&](const std::string& main, bool english) {
    std::vector<AnswerCount> out;
    if (spec.annotations == 1) return std::vector<AnswerCount>{{main, 1}};
    out.push_back({main, spec.annotations - 1});
    std::string other = classes[class_pick(rng)].text();
    if (!english) other = corpus.answer_translations.at(other);
    if (other == main) {
      out.front().count += 1;
    } else {
      out.push_back({other, 1});
    }
    return out;
  };

  for (std::size_t i = 0; i < spec.pairs; ++i) {
    const Image img = make_image();
    const Sentence s = make_sentence();
    const std::string en_answer = img.tags[s.type];
    ParallelRecord p;
    for (ExampleRecord* r : {&p.source, &p.target}) {
      r->image_id = "img" + std::to_string(i);
      r->tags = img.tags;
      r->features = img.features;
      r->region_labels = img.labels;
    }
    p.source.question_id = "p" + std::to_string(i) + "-en";
    p.source.question = join_words(s.en);
    p.source.lang = "en";
    p.source.answers = answers_for(en_answer, true);
    p.target.question_id = "p" + std::to_string(i) + "-xx";
    p.target.question = join_words(s.tg);
    p.target.lang = "xx";
    p.target.answers = p.source.answers;
    for (auto& a : p.target.answers) a.answer = corpus.answer_translations.at(a.answer);
    p.alignment = s.align;
    corpus.parallel.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < spec.tasks; ++i) {
    const Image img = make_image();
    const Sentence s = make_sentence();
    ExampleRecord r;
    r.question_id = "t" + std::to_string(i);
    r.image_id = "timg" + std::to_string(i);
    r.question = join_words(s.tg);
    r.lang = "xx";
    r.tags = img.tags;
    r.features = img.features;
    r.region_labels = img.labels;
    r.answers = answers_for(corpus.answer_translations.at(img.tags[s.type]), false);
    corpus.task.push_back(std::move(r));
  }
  return corpus;
}

}  // namespace xlkd
