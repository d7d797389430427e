#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "idpg/generator.hpp"

using idpg::ArchVariant;
using idpg::ClassifierHead;
using idpg::DepthMode;
using idpg::DType;
using idpg::EmbeddingTable;
using idpg::ForwardResult;
using idpg::GenFlavor;
using idpg::GeneratorConfig;
using idpg::HeadMode;
using idpg::InputSource;
using idpg::Nonlinearity;
using idpg::PromptGenerator;
using idpg::PromptPosition;
using idpg::RepEncoder;
using idpg::Rng;
using idpg::SentenceRep;
using idpg::Sharing;
using idpg::Tape;
using idpg::TemplateTokens;
using idpg::Tensor;
using idpg::Transformer;
using idpg::TransformerConfig;

namespace {

TransformerConfig tiny_bk(std::size_t layers = 2) {
  TransformerConfig cfg;
  cfg.num_layers = layers;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_inner = 16;
  cfg.vocab_size = 40;
  cfg.max_seq = 16;
  return cfg;
}

GeneratorConfig tiny_gen(GenFlavor flavor, DepthMode depth,
                         Sharing sharing = Sharing::M) {
  GeneratorConfig cfg;
  cfg.flavor = flavor;
  cfg.t = 2;
  cfg.m = 4;
  cfg.d = 8;
  cfg.enc_dim = 8;
  cfg.n = 2;
  cfg.depth_mode = depth;
  cfg.sharing = sharing;
  cfg.input_source = InputSource::layer0;
  cfg.num_layers = 2;
  return cfg;
}

Tensor rand_rep(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  return Tensor::from({dim}, std::move(v), DType::f64);
}

void zero_weights(PromptGenerator& g) {
  g.visit_params([](const std::string& path, Tensor& t) {
    if (path.find("/bias.") == std::string::npos) {
      t.fill(std::vector<double>(t.size(), 0.0));
    }
  });
}

void fill_random(Tensor& t, Rng& rng) {
  std::vector<double> v(t.size());
  for (double& x : v) x = rng.normal(0.0, 0.5);
  t.fill(v);
}

std::vector<Tensor> collect_params(PromptGenerator& g,
                                   std::vector<std::string>* paths = nullptr) {
  std::vector<Tensor> out;
  g.visit_params([&](const std::string& path, Tensor& t) {
    out.push_back(t);
    if (paths) paths->push_back(path);
  });
  return out;
}

// Analytic gradients of a scalar loss against central differences, with
// the forward rebuilt from scratch for every perturbation.
double max_grad_rel_err(const std::function<Tensor(Tape&)>& loss_fn,
                        std::vector<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
  Tape tape(DType::f64);
  tape.backward(loss_fn(tape));
  const double h = 1e-5;
  double worst = 0.0;
  for (Tensor& p : params) {
    REQUIRE(p.has_grad());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p.at(i);
      p.set(i, keep + h);
      Tape up_tape(DType::f64);
      const double up = loss_fn(up_tape).at(0);
      p.set(i, keep - h);
      Tape dn_tape(DType::f64);
      const double dn = loss_fn(dn_tape).at(0);
      p.set(i, keep);
      const double fd = (up - dn) / (2.0 * h);
      const double an = p.grad()[i];
      const double denom = std::max({std::abs(an), std::abs(fd), 1.0});
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
  }
  return worst;
}

std::string table_text() {
  return "x 1 0\n"
         "y 0 1\n"
         "z 2 3\n";
}

}  // namespace

TEST_CASE("generator config enums round trip through their names") {
  CHECK(idpg::parse_gen_flavor("phm") == GenFlavor::phm);
  CHECK(idpg::parse_depth_mode("multi") == DepthMode::multi);
  CHECK(idpg::parse_sharing("L") == Sharing::L);
  CHECK(idpg::parse_input_source("previous_layer") ==
        InputSource::previous_layer);
  CHECK(idpg::parse_rep_encoder("bag_of_vectors") ==
        RepEncoder::bag_of_vectors);
  CHECK(idpg::parse_arch_variant("residual_layernorm") ==
        ArchVariant::residual_layernorm);
  CHECK(idpg::parse_nonlinearity("gelu") == Nonlinearity::gelu);
  CHECK(idpg::parse_prompt_position("pos3") == PromptPosition::pos3);
  CHECK_THROWS_AS(idpg::parse_sharing("XL"), idpg::ParseError);
  CHECK_THROWS_AS(idpg::parse_prompt_position("pos5"), idpg::ParseError);
  for (auto v : {Sharing::S, Sharing::M, Sharing::L}) {
    CHECK(idpg::parse_sharing(idpg::to_string(v)) == v);
  }
  for (auto v : {ArchVariant::plain, ArchVariant::residual,
                 ArchVariant::layernorm, ArchVariant::residual_layernorm}) {
    CHECK(idpg::parse_arch_variant(idpg::to_string(v)) == v);
  }
}

TEST_CASE("generator config validation rejects inconsistent settings") {
  GeneratorConfig ok = tiny_gen(GenFlavor::phm, DepthMode::multi);
  CHECK_NOTHROW(ok.validate());

  GeneratorConfig bad = ok;
  bad.t = 0;
  CHECK_THROWS_AS(bad.validate(), idpg::ConfigError);

  bad = ok;
  bad.n = 3; // does not divide m=4
  CHECK_THROWS_AS(bad.validate(), idpg::ConfigError);

  bad = ok;
  bad.enc_dim = 6; // backbone_cls must match d
  CHECK_THROWS_AS(bad.validate(), idpg::ConfigError);

  bad = ok;
  bad.encoder = RepEncoder::bag_of_vectors;
  bad.enc_dim = 4;
  bad.input_source = InputSource::previous_layer;
  CHECK_THROWS_AS(bad.validate(), idpg::ConfigError);
  bad.input_source = InputSource::layer0;
  CHECK_NOTHROW(bad.validate());

  bad = ok;
  bad.num_layers = 0;
  CHECK_THROWS_AS(bad.validate(), idpg::ConfigError);
}

TEST_CASE("embedding table parses the text layout") {
  std::istringstream is(table_text());
  const EmbeddingTable table = EmbeddingTable::parse(is, "inline");
  CHECK(table.dim() == 2);
  CHECK(table.size() == 3);
  REQUIRE(table.find("z") != nullptr);
  CHECK((*table.find("z"))[1] == 3.0);
  CHECK(table.find("missing") == nullptr);

  std::istringstream dup("a 1 2\na 3 4\n");
  const EmbeddingTable last = EmbeddingTable::parse(dup, "inline");
  CHECK(last.size() == 1);
  CHECK((*last.find("a"))[0] == 3.0);

  std::istringstream ragged("a 1 2\nb 1\n");
  CHECK_THROWS_WITH_AS(EmbeddingTable::parse(ragged, "inline"),
                       doctest::Contains("line 2"), idpg::ParseError);
  std::istringstream alpha("a 1 two\n");
  CHECK_THROWS_AS(EmbeddingTable::parse(alpha, "inline"), idpg::ParseError);
  std::istringstream bare("a\n");
  CHECK_THROWS_AS(EmbeddingTable::parse(bare, "inline"), idpg::ParseError);
  std::istringstream empty("\n\n");
  CHECK_THROWS_AS(EmbeddingTable::parse(empty, "inline"), idpg::ParseError);

  const auto path =
      (std::filesystem::temp_directory_path() / "idpg_vecs.txt").string();
  {
    std::ofstream os(path);
    os << table_text();
  }
  const EmbeddingTable loaded = EmbeddingTable::load(path);
  CHECK(loaded.dim() == 2);
  CHECK(loaded.size() == 3);
  CHECK_THROWS_AS(EmbeddingTable::load(path + ".nope"), idpg::ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("bag-of-vectors encoding averages over all tokens") {
  std::istringstream is(table_text());
  const EmbeddingTable table = EmbeddingTable::parse(is, "inline");

  // single known token: its own vector
  SentenceRep one = idpg::encode_bag_of_vectors({"z"}, table, DType::f64);
  CHECK(one.vector.at(0) == 2.0);
  CHECK(one.vector.at(1) == 3.0);
  CHECK(one.source == RepEncoder::bag_of_vectors);

  // hand mean of (1,0), (0,1), (2,3)
  SentenceRep mean =
      idpg::encode_bag_of_vectors({"x", "y", "z"}, table, DType::f64);
  CHECK(mean.vector.at(0) == doctest::Approx(1.0));
  CHECK(mean.vector.at(1) == doctest::Approx(4.0 / 3.0));

  // opposite vectors cancel
  std::istringstream opp("p 1 -2\nq -1 2\n");
  const EmbeddingTable sym = EmbeddingTable::parse(opp, "inline");
  SentenceRep zero = idpg::encode_bag_of_vectors({"p", "q"}, sym, DType::f64);
  CHECK(zero.vector.at(0) == 0.0);
  CHECK(zero.vector.at(1) == 0.0);

  // a miss contributes a zero vector but still divides the sum
  SentenceRep half = idpg::encode_bag_of_vectors({"z", "nope"}, table,
                                                 DType::f64);
  CHECK(half.vector.at(0) == doctest::Approx(1.0));
  CHECK(half.vector.at(1) == doctest::Approx(1.5));

  SentenceRep all_miss =
      idpg::encode_bag_of_vectors({"no", "nope"}, table, DType::f64);
  CHECK(all_miss.vector.at(0) == 0.0);

  CHECK_THROWS_AS(idpg::encode_bag_of_vectors({}, table, DType::f64),
                  idpg::DimensionError);
}

TEST_CASE("backbone sentence reps are pure and instance dependent") {
  Rng rng(31);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  const std::vector<std::size_t> a = {0, 7, 8, 3}, b = {0, 9, 8, 3};

  SentenceRep ra1 = idpg::encode_backbone_cls(tr, a);
  SentenceRep ra2 = idpg::encode_backbone_cls(tr, a);
  SentenceRep rb = idpg::encode_backbone_cls(tr, b);
  CHECK(ra1.vector.values() == ra2.vector.values());
  double diff = 0.0;
  for (std::size_t i = 0; i < 8; ++i)
    diff += std::abs(ra1.vector.at(i) - rb.vector.at(i));
  CHECK(diff > 0.0);
  CHECK_THROWS_AS(idpg::encode_backbone_cls(tr, {}), idpg::DimensionError);

  // embedding-level rep equals the hand mean of embedded rows
  SentenceRep emb = idpg::embedding_level_rep(tr, a);
  Tape tape(DType::f64);
  Tensor rows = tr.embed(tape, a);
  for (std::size_t j = 0; j < 8; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += rows.at(i, j);
    mean /= static_cast<double>(a.size());
    CHECK(emb.vector.at(j) == doctest::Approx(mean).epsilon(1e-12));
  }
  SentenceRep emb_b = idpg::embedding_level_rep(tr, b);
  double ediff = 0.0;
  for (std::size_t i = 0; i < 8; ++i)
    ediff += std::abs(emb.vector.at(i) - emb_b.vector.at(i));
  CHECK(ediff > 0.0);
}

TEST_CASE("prompt generation matches the closed-form dense example") {
  GeneratorConfig cfg;
  cfg.flavor = GenFlavor::dnn;
  cfg.t = 1;
  cfg.m = 1;
  cfg.d = 2;
  cfg.enc_dim = 2;
  cfg.depth_mode = DepthMode::single;
  cfg.encoder = RepEncoder::bag_of_vectors; // allows enc_dim != d rules aside
  Rng rng(1);
  PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
  g.dnn_down()[0].w.fill({1.0, 0.0});
  g.dnn_up()[0].w.fill({1.0, 2.0});

  Tape tape(DType::f64);
  Tensor rep = Tensor::from({2}, {0.5, 9.0}, DType::f64);
  Tensor prompt = g.generate(tape, rep, 0);
  REQUIRE(prompt.shape() == idpg::Shape{1, 2});
  const double th = std::tanh(0.5);
  CHECK(prompt.at(0, 0) == doctest::Approx(th).epsilon(1e-12));
  CHECK(prompt.at(0, 1) == doctest::Approx(2.0 * th).epsilon(1e-12));
  CHECK(prompt.at(0, 0) == doctest::Approx(0.46211716).epsilon(1e-7));
  CHECK(prompt.at(0, 1) == doctest::Approx(0.92423431).epsilon(1e-7));
}

TEST_CASE("zero-weight generators emit exactly the bias bank") {
  for (GenFlavor flavor : {GenFlavor::phm, GenFlavor::dnn}) {
    Rng rng(5);
    GeneratorConfig cfg = tiny_gen(flavor, DepthMode::multi, Sharing::M);
    PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
    zero_weights(g);
    std::vector<Tensor>& biases = flavor == GenFlavor::phm
                                      ? g.phm_up()[0].biases()
                                      : g.dnn_up()[0].biases;
    for (Tensor& b : biases) fill_random(b, rng);

    for (std::size_t layer = 0; layer < 2; ++layer) {
      for (int trial = 0; trial < 10; ++trial) {
        Tape tape(DType::f64);
        Tensor prompt = g.generate(tape, rand_rep(8, rng), layer);
        for (std::size_t i = 0; i < 16; ++i) {
          CHECK(prompt.at(i / 8, i % 8) == biases[layer].at(i));
        }
      }
    }
  }
}

TEST_CASE("random-weight prompts are instance dependent") {
  Rng rng(6);
  PromptGenerator g = PromptGenerator::init(
      tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M), rng, DType::f64);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape(DType::f64);
    Tensor pa = g.generate(tape, rand_rep(8, rng), 0);
    Tensor pb = g.generate(tape, rand_rep(8, rng), 0);
    double norm = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      const double dx = pa.at(i / 8, i % 8) - pb.at(i / 8, i % 8);
      norm += dx * dx;
    }
    CHECK(std::sqrt(norm) > 1e-8);
  }
}

TEST_CASE("PHM generator with n=1 and unit pool equals the dense one") {
  GeneratorConfig pcfg = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  pcfg.n = 1;
  GeneratorConfig dcfg = pcfg;
  dcfg.flavor = GenFlavor::dnn;
  Rng rng1(9), rng2(10);
  PromptGenerator gp = PromptGenerator::init(pcfg, rng1, DType::f64);
  PromptGenerator gd = PromptGenerator::init(dcfg, rng2, DType::f64);

  gp.pool_down()->mats[0].fill({1.0});
  gp.pool_up()->mats[0].fill({1.0});
  gd.dnn_down()[0].w.fill(gp.phm_down()[0].b_factors()[0].values());
  gd.dnn_up()[0].w.fill(gp.phm_up()[0].b_factors()[0].values());
  gd.dnn_down()[0].biases[0].fill(gp.phm_down()[0].biases()[0].values());
  for (std::size_t l = 0; l < 2; ++l) {
    gd.dnn_up()[0].biases[l].fill(gp.phm_up()[0].biases()[l].values());
  }

  Rng rep_rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor rep = rand_rep(8, rep_rng);
    for (std::size_t layer = 0; layer < 2; ++layer) {
      Tape tape(DType::f64);
      Tensor pp = gp.generate(tape, rep, layer);
      Tensor pd = gd.generate(tape, rep, layer);
      for (std::size_t i = 0; i < pp.size(); ++i) {
        CHECK(std::abs(pp.at(i / 8, i % 8) - pd.at(i / 8, i % 8)) <= 1e-10);
      }
    }
  }
}

TEST_CASE("sharing variants: S is depth invariant, M varies through biases") {
  Rng rng(12);
  PromptGenerator s = PromptGenerator::init(
      tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::S), rng, DType::f64);
  Tensor rep = rand_rep(8, rng);
  Tape tape(DType::f64);
  Tensor p0 = s.generate(tape, rep, 0);
  Tensor p1 = s.generate(tape, rep, 1);
  CHECK(p0.values() == p1.values());

  PromptGenerator m = PromptGenerator::init(
      tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M), rng, DType::f64);
  for (Tensor& b : m.phm_up()[0].biases()) fill_random(b, rng);
  Tensor q0 = m.generate(tape, rep, 0);
  Tensor q1 = m.generate(tape, rep, 1);
  CHECK(q0.values() != q1.values());

  PromptGenerator l = PromptGenerator::init(
      tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::L), rng, DType::f64);
  Tensor r0 = l.generate(tape, rep, 0);
  Tensor r1 = l.generate(tape, rep, 1);
  CHECK(r0.values() != r1.values());
}

TEST_CASE("generator budgets: live enumeration equals the closed forms") {
  // dense, paper dims
  CHECK(idpg::dnn_generator_param_count(256, 1024, 5, 1024, Sharing::S, 1) ==
        1578240);
  CHECK(idpg::dnn_generator_param_count(16, 1024, 5, 1024, Sharing::M, 24) ==
        221200);
  CHECK(idpg::dnn_generator_param_count(1, 1, 1, 1, Sharing::S, 1) == 4);
  // PHM, paper dims
  CHECK(idpg::phm_generator_param_count(16, 256, 1024, 5, 1024,
                                        DepthMode::single, Sharing::S, 1) ==
        107776);
  CHECK(idpg::phm_generator_param_count(16, 16, 1024, 5, 1024,
                                        DepthMode::multi, Sharing::M, 24) ==
        137232);
  CHECK(idpg::phm_generator_param_count(4, 16, 300, 5, 1024, DepthMode::multi,
                                        Sharing::M, 24) == 144704);

  for (GenFlavor flavor : {GenFlavor::dnn, GenFlavor::phm}) {
    for (DepthMode depth : {DepthMode::single, DepthMode::multi}) {
      for (Sharing sharing : {Sharing::S, Sharing::M, Sharing::L}) {
        Rng rng(3);
        GeneratorConfig cfg = tiny_gen(flavor, depth, sharing);
        PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
        const std::int64_t expected =
            flavor == GenFlavor::dnn
                ? idpg::dnn_generator_param_count(
                      cfg.m, cfg.enc_dim, cfg.t, cfg.d,
                      depth == DepthMode::single ? Sharing::S : sharing,
                      depth == DepthMode::single ? 1 : cfg.num_layers)
                : idpg::phm_generator_param_count(
                      cfg.n, cfg.m, cfg.enc_dim, cfg.t, cfg.d, depth, sharing,
                      cfg.num_layers);
        CHECK(g.param_count() == expected);

        std::vector<std::string> paths;
        collect_params(g, &paths);
        std::set<std::string> unique(paths.begin(), paths.end());
        CHECK(unique.size() == paths.size());
      }
    }
  }

  // ordering S < M < L at fixed dims
  for (GenFlavor flavor : {GenFlavor::dnn, GenFlavor::phm}) {
    auto count = [&](Sharing sh) {
      Rng rng(4);
      return PromptGenerator::init(tiny_gen(flavor, DepthMode::multi, sh), rng,
                                   DType::f64)
          .param_count();
    };
    CHECK(count(Sharing::S) < count(Sharing::M));
    CHECK(count(Sharing::M) < count(Sharing::L));
  }

  // arch extras on top of the plain budget
  GeneratorConfig plain = tiny_gen(GenFlavor::phm, DepthMode::single);
  Rng rng(5);
  const std::int64_t base =
      PromptGenerator::init(plain, rng, DType::f64).param_count();
  GeneratorConfig ln = plain;
  ln.arch_variant = ArchVariant::layernorm;
  Rng rng2(5);
  CHECK(PromptGenerator::init(ln, rng2, DType::f64).param_count() ==
        base + 2 * 8);
  GeneratorConfig res = plain;
  res.arch_variant = ArchVariant::residual; // enc_dim == d: identity residual
  Rng rng3(5);
  CHECK(PromptGenerator::init(res, rng3, DType::f64).param_count() == base);
  GeneratorConfig rln = plain;
  rln.arch_variant = ArchVariant::residual_layernorm;
  rln.encoder = RepEncoder::bag_of_vectors;
  rln.enc_dim = 4; // mapped residual: d*enc extra
  Rng rng4(5);
  const std::int64_t rln_base =
      idpg::phm_generator_param_count(2, 4, 4, 2, 8, DepthMode::single,
                                      Sharing::S, 1);
  CHECK(PromptGenerator::init(rln, rng4, DType::f64).param_count() ==
        rln_base + 8 * 4 + 6 * 8);
}

TEST_CASE("template splice slots follow the position table") {
  const TemplateTokens single = TemplateTokens::single({7, 8});
  CHECK(single.ids == std::vector<std::size_t>{idpg::kClsId, 7, 8, idpg::kEosId});
  CHECK(idpg::splice_index(single, PromptPosition::pos0) == 1);
  CHECK(idpg::splice_index(single, PromptPosition::pos1) == 3);
  CHECK(idpg::splice_index(single, PromptPosition::pos4) == 4);
  CHECK_THROWS_AS(idpg::splice_index(single, PromptPosition::pos2),
                  idpg::ConfigError);
  CHECK_THROWS_AS(idpg::splice_index(single, PromptPosition::pos3),
                  idpg::ConfigError);

  const TemplateTokens pair = TemplateTokens::pair({7}, {9});
  CHECK(pair.ids == std::vector<std::size_t>{idpg::kClsId, 7, idpg::kSepId, 9,
                                             idpg::kEosId});
  CHECK(idpg::splice_index(pair, PromptPosition::pos0) == 1);
  CHECK(idpg::splice_index(pair, PromptPosition::pos1) == 2);
  CHECK(idpg::splice_index(pair, PromptPosition::pos2) == 3);
  CHECK(idpg::splice_index(pair, PromptPosition::pos3) == 4);
  CHECK(idpg::splice_index(pair, PromptPosition::pos4) == 5);
}

TEST_CASE("assembled input splices prompt rows and keeps real positions") {
  Rng rng(21);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  const TemplateTokens tmpl = TemplateTokens::pair({7, 8}, {9});
  // [CLS] 7 8 [SEP] 9 [EOS]

  Tape tape(DType::f64);
  Tensor plain = idpg::assemble_input(tape, tr, tmpl, nullptr,
                                      PromptPosition::pos2);
  Tensor embedded = tr.embed(tape, tmpl.ids);
  CHECK(plain.values() == embedded.values());

  std::vector<double> pv(2 * 8);
  for (std::size_t i = 0; i < pv.size(); ++i) pv[i] = 0.01 * (i + 1.0);
  Tensor prompt = Tensor::from({2, 8}, pv, DType::f64);
  Tensor out = idpg::assemble_input(tape, tr, tmpl, &prompt,
                                    PromptPosition::pos2);
  const std::size_t s = idpg::splice_index(tmpl, PromptPosition::pos2);
  REQUIRE(out.shape() == idpg::Shape{8, 8});
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      double expect;
      if (i < s) {
        expect = embedded.at(i, j); // untouched head, original positions
      } else if (i < s + 2) {
        expect = prompt.at(i - s, j); // raw prompt rows, no positional part
      } else {
        expect = embedded.at(i - 2, j); // tail keeps its pre-splice position
      }
      CHECK(out.at(i, j) == expect);
    }
  }

  Tensor bad = Tensor::from({2, 4}, std::vector<double>(8, 0.0), DType::f64);
  CHECK_THROWS_AS(idpg::assemble_input(tape, tr, tmpl, &bad,
                                       PromptPosition::pos2),
                  idpg::DimensionError);
}

TEST_CASE("single-depth degeneration is bit exact against a prompt bank") {
  Rng rng(41);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  GeneratorConfig cfg = tiny_gen(GenFlavor::phm, DepthMode::single);
  PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
  zero_weights(g);
  fill_random(g.phm_up()[0].biases()[0], rng);
  Tensor bank = Tensor::from({2, 8}, g.phm_up()[0].biases()[0].values(),
                             DType::f64);

  Rng input_rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> s1(2 + input_rng.below(3));
    for (auto& id : s1) id = 5 + input_rng.below(30);
    const TemplateTokens tmpl = TemplateTokens::single(s1);
    const SentenceRep rep = idpg::encode_backbone_cls(tr, tmpl.ids);

    Tape ta(DType::f64), tb(DType::f64);
    ForwardResult via_gen =
        idpg::forward_idpg(ta, tr, head, g, tmpl, PromptPosition::pos1, rep);
    ForwardResult via_bank = idpg::forward_prompt_bank(
        tb, tr, head, bank, tmpl, PromptPosition::pos1);
    CHECK(via_gen.output.values() == via_bank.output.values());
    CHECK(via_gen.h_cls.values() == via_bank.h_cls.values());
  }
}

TEST_CASE("multi-depth degeneration is bit exact against deep prompt banks") {
  Rng rng(42);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  GeneratorConfig cfg = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  cfg.input_source = InputSource::previous_layer;
  PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
  zero_weights(g);

  SUBCASE("per-layer biases match a per-layer bank") {
    for (Tensor& b : g.phm_up()[0].biases()) fill_random(b, rng);
  }
  SUBCASE("equal biases match a constant bank") {
    fill_random(g.phm_up()[0].biases()[0], rng);
    g.phm_up()[0].biases()[1].fill(g.phm_up()[0].biases()[0].values());
  }

  std::vector<Tensor> bank;
  for (const Tensor& b : g.phm_up()[0].biases()) {
    bank.push_back(Tensor::from({2, 8}, b.values(), DType::f64));
  }

  Rng input_rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> s1(2 + input_rng.below(3));
    for (auto& id : s1) id = 5 + input_rng.below(30);
    const TemplateTokens tmpl = TemplateTokens::single(s1);
    const SentenceRep rep = idpg::embedding_level_rep(tr, tmpl.ids);

    Tape ta(DType::f64), tb(DType::f64);
    ForwardResult via_gen =
        idpg::forward_idpg(ta, tr, head, g, tmpl, PromptPosition::pos0, rep);
    ForwardResult via_bank = idpg::forward_deep_prompt_bank(
        tb, tr, head, bank, tmpl, PromptPosition::pos0);
    CHECK(via_gen.output.values() == via_bank.output.values());
  }
}

TEST_CASE("multi-depth forward matches an inline spell-out of its hook") {
  Rng rng(43);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  GeneratorConfig cfg = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  cfg.input_source = InputSource::previous_layer;
  PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);

  const TemplateTokens tmpl = TemplateTokens::single({6, 7, 8});
  const SentenceRep rep = idpg::embedding_level_rep(tr, tmpl.ids);
  const PromptPosition pos = PromptPosition::pos1;

  Tape ta(DType::f64);
  ForwardResult got = idpg::forward_idpg(ta, tr, head, g, tmpl, pos, rep);

  Tape tb(DType::f64);
  const std::size_t s = idpg::splice_index(tmpl, pos);
  Tensor slot = tb.constant({2, 8}, std::vector<double>(16, 0.0));
  Tensor x = idpg::assemble_input(tb, tr, tmpl, &slot, pos);
  idpg::EncodeOptions opts;
  opts.layer_hook = [&](Tape& tp, const Tensor& h, std::size_t layer) {
    Tensor src = layer == 0 ? rep.vector : tp.row(h, 0);
    return tp.overwrite_rows(h, g.generate(tp, src, layer), s);
  };
  idpg::EncoderState st = tr.encode_embedded(tb, x, opts);
  Tensor manual = head.forward(tb, st.h_cls);

  CHECK(got.output.values() == manual.values());
  CHECK(got.prompt_start == s);
}

TEST_CASE("layer0 and previous_layer agree on a one-layer backbone") {
  Rng rng(44);
  Transformer tr = Transformer::init(tiny_bk(1), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  GeneratorConfig base = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  base.num_layers = 1;

  GeneratorConfig c0 = base, c1 = base;
  c0.input_source = InputSource::layer0;
  c1.input_source = InputSource::previous_layer;
  Rng ga(7), gb(7);
  PromptGenerator g0 = PromptGenerator::init(c0, ga, DType::f64);
  PromptGenerator g1 = PromptGenerator::init(c1, gb, DType::f64);

  const TemplateTokens tmpl = TemplateTokens::single({5, 6});
  const SentenceRep rep = idpg::embedding_level_rep(tr, tmpl.ids);
  Tape ta(DType::f64), tb(DType::f64);
  ForwardResult a =
      idpg::forward_idpg(ta, tr, head, g0, tmpl, PromptPosition::pos0, rep);
  ForwardResult b =
      idpg::forward_idpg(tb, tr, head, g1, tmpl, PromptPosition::pos0, rep);
  CHECK(a.output.values() == b.output.values());
}

TEST_CASE("idpg forward rejects mismatched shapes and bank sizes") {
  Rng rng(45);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  const TemplateTokens tmpl = TemplateTokens::single({5});

  GeneratorConfig wrong_depth = tiny_gen(GenFlavor::phm, DepthMode::multi);
  wrong_depth.num_layers = 3;
  PromptGenerator g = PromptGenerator::init(wrong_depth, rng, DType::f64);
  const SentenceRep rep = idpg::embedding_level_rep(tr, tmpl.ids);
  Tape tape(DType::f64);
  CHECK_THROWS_AS(idpg::forward_idpg(tape, tr, head, g, tmpl,
                                     PromptPosition::pos0, rep),
                  idpg::ContractError);

  std::vector<Tensor> bank = {
      Tensor::from({2, 8}, std::vector<double>(16, 0.1), DType::f64)};
  CHECK_THROWS_AS(idpg::forward_deep_prompt_bank(tape, tr, head, bank, tmpl,
                                                 PromptPosition::pos0),
                  idpg::ContractError);
  bank.push_back(Tensor::from({1, 8}, std::vector<double>(8, 0.1), DType::f64));
  CHECK_THROWS_AS(idpg::forward_deep_prompt_bank(tape, tr, head, bank, tmpl,
                                                 PromptPosition::pos0),
                  idpg::DimensionError);

  PromptGenerator bad_rep_gen = PromptGenerator::init(
      tiny_gen(GenFlavor::phm, DepthMode::single), rng, DType::f64);
  Tensor short_rep = Tensor::from({4}, {1, 2, 3, 4}, DType::f64);
  CHECK_THROWS_AS(bad_rep_gen.generate(tape, short_rep, 0),
                  idpg::DimensionError);
  CHECK_THROWS_AS(bad_rep_gen.generate(tape, rand_rep(8, rng), 1),
                  idpg::IndexError);
}

TEST_CASE("generator gradients match finite differences through the model") {
  Rng rng(51);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  const TemplateTokens tmpl = TemplateTokens::pair({6, 7}, {9});

  auto run = [&](GeneratorConfig cfg, PromptPosition pos, std::uint64_t seed) {
    Rng grng(seed);
    PromptGenerator g = PromptGenerator::init(cfg, grng, DType::f64);
    const SentenceRep rep =
        cfg.depth_mode == DepthMode::single
            ? idpg::encode_backbone_cls(tr, tmpl.ids)
            : idpg::embedding_level_rep(tr, tmpl.ids);
    auto loss_fn = [&](Tape& tape) {
      ForwardResult fr = idpg::forward_idpg(tape, tr, head, g, tmpl, pos, rep);
      return idpg::nll_loss(tape, fr.output, 1);
    };
    return max_grad_rel_err(loss_fn, collect_params(g));
  };

  GeneratorConfig a = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  a.input_source = InputSource::previous_layer;
  CHECK(run(a, PromptPosition::pos2, 71) < 1e-4);

  GeneratorConfig b = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::L);
  b.input_source = InputSource::layer0;
  b.arch_variant = ArchVariant::layernorm;
  CHECK(run(b, PromptPosition::pos0, 72) < 1e-4);

  GeneratorConfig c = tiny_gen(GenFlavor::dnn, DepthMode::single);
  c.arch_variant = ArchVariant::residual;
  CHECK(run(c, PromptPosition::pos4, 73) < 1e-4);
}

TEST_CASE("generator-only gradients cover every arch variant") {
  for (ArchVariant arch :
       {ArchVariant::plain, ArchVariant::residual, ArchVariant::layernorm,
        ArchVariant::residual_layernorm}) {
    for (GenFlavor flavor : {GenFlavor::phm, GenFlavor::dnn}) {
      GeneratorConfig cfg = tiny_gen(flavor, DepthMode::single);
      cfg.arch_variant = arch;
      cfg.encoder = RepEncoder::bag_of_vectors;
      cfg.enc_dim = 4; // forces the learned residual map
      Rng rng(81);
      PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
      Tensor rep = rand_rep(4, rng);
      std::vector<double> w(16);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * (i % 5);

      auto loss_fn = [&](Tape& tape) {
        Tensor prompt = g.generate(tape, rep, 0);
        Tensor weights = tape.constant({2, 8}, w);
        return tape.sum(tape.mul(prompt, weights));
      };
      CHECK(max_grad_rel_err(loss_fn, collect_params(g)) < 1e-4);
    }
  }
}

TEST_CASE("frozen backbone stays gradient free under idpg training") {
  Rng rng(52);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  GeneratorConfig cfg = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  cfg.input_source = InputSource::previous_layer;
  PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);

  const TemplateTokens tmpl = TemplateTokens::single({7, 9});
  const SentenceRep rep = idpg::embedding_level_rep(tr, tmpl.ids);
  Tape tape(DType::f64);
  ForwardResult fr =
      idpg::forward_idpg(tape, tr, head, g, tmpl, PromptPosition::pos1, rep);
  tape.backward(idpg::nll_loss(tape, fr.output, 0));

  tr.visit_params([](const std::string&, Tensor& t) {
    CHECK_FALSE(t.has_grad());
  });
  bool any_nonzero = false;
  g.visit_params([&](const std::string&, Tensor& t) {
    REQUIRE(t.has_grad());
    for (double v : t.grad()) any_nonzero = any_nonzero || v != 0.0;
  });
  CHECK(any_nonzero);
  CHECK(head.w.has_grad());
}

TEST_CASE("cached reps reproduce the uncached forward bitwise") {
  Rng rng(53);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  GeneratorConfig cfg = tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::M);
  PromptGenerator g = PromptGenerator::init(cfg, rng, DType::f64);
  const TemplateTokens tmpl = TemplateTokens::single({11, 12, 13});

  idpg::RepCache cache;
  const idpg::RepKey key{3, 17};
  CHECK(cache.find(key) == nullptr);
  cache.put(key, idpg::make_instance_rep(cfg, tr, tmpl.ids, {}, nullptr));
  REQUIRE(cache.find(key) != nullptr);
  CHECK(cache.size() == 1);

  const SentenceRep fresh =
      idpg::make_instance_rep(cfg, tr, tmpl.ids, {}, nullptr);
  CHECK(fresh.vector.values() == cache.find(key)->vector.values());

  Tape ta(DType::f64), tb(DType::f64);
  ForwardResult cached = idpg::forward_idpg(ta, tr, head, g, tmpl,
                                            PromptPosition::pos0,
                                            *cache.find(key));
  ForwardResult direct = idpg::forward_idpg(tb, tr, head, g, tmpl,
                                            PromptPosition::pos0, fresh);
  CHECK(cached.output.values() == direct.output.values());
}

TEST_CASE("instance rep dispatch follows the config") {
  Rng rng(54);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  const TemplateTokens tmpl = TemplateTokens::single({9});

  GeneratorConfig single = tiny_gen(GenFlavor::phm, DepthMode::single);
  const SentenceRep s = idpg::make_instance_rep(single, tr, tmpl.ids, {},
                                                nullptr);
  CHECK(s.vector.values() ==
        idpg::encode_backbone_cls(tr, tmpl.ids).vector.values());

  GeneratorConfig multi = tiny_gen(GenFlavor::phm, DepthMode::multi);
  const SentenceRep m = idpg::make_instance_rep(multi, tr, tmpl.ids, {},
                                                nullptr);
  CHECK(m.vector.values() ==
        idpg::embedding_level_rep(tr, tmpl.ids).vector.values());

  GeneratorConfig bag = tiny_gen(GenFlavor::phm, DepthMode::multi);
  bag.encoder = RepEncoder::bag_of_vectors;
  bag.enc_dim = 2;
  bag.input_source = InputSource::layer0;
  std::istringstream is(table_text());
  const EmbeddingTable table = EmbeddingTable::parse(is, "inline");
  const SentenceRep b =
      idpg::make_instance_rep(bag, tr, tmpl.ids, {"x", "z"}, &table);
  CHECK(b.vector.at(0) == doctest::Approx(1.5));
  CHECK(b.vector.at(1) == doctest::Approx(1.5));

  CHECK_THROWS_AS(idpg::make_instance_rep(bag, tr, tmpl.ids, {"x"}, nullptr),
                  idpg::ConfigError);
  bag.enc_dim = 4;
  CHECK_THROWS_AS(idpg::make_instance_rep(bag, tr, tmpl.ids, {"x"}, &table),
                  idpg::ConfigError);
}

TEST_CASE("padded forwards mask [PAD] rows and match unpadded bitwise") {
  Rng rng(57);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  ClassifierHead head =
      ClassifierHead::init(HeadMode::classification, 2, 8, rng, DType::f64);
  const TemplateTokens tmpl = TemplateTokens::single({7, 9, 11});
  const TemplateTokens padded = tmpl.padded_to(tmpl.ids.size() + 3);
  CHECK(padded.pad == 3);
  CHECK(padded.ids.back() == idpg::kPadId);
  CHECK(idpg::splice_index(padded, PromptPosition::pos4) ==
        idpg::splice_index(tmpl, PromptPosition::pos4));
  CHECK_THROWS_AS(tmpl.padded_to(2), idpg::ContractError);

  Tape ta(DType::f64), tb(DType::f64);
  ForwardResult plain = idpg::forward_plain(ta, tr, head, tmpl);
  ForwardResult plain_p = idpg::forward_plain(tb, tr, head, padded);
  CHECK(plain.output.values() == plain_p.output.values());

  for (DepthMode depth : {DepthMode::single, DepthMode::multi}) {
    GeneratorConfig cfg = tiny_gen(GenFlavor::phm, depth, Sharing::M);
    cfg.input_source = InputSource::previous_layer;
    Rng grng(58);
    PromptGenerator g = PromptGenerator::init(cfg, grng, DType::f64);
    const SentenceRep rep = depth == DepthMode::single
                                ? idpg::encode_backbone_cls(tr, tmpl.ids)
                                : idpg::embedding_level_rep(tr, tmpl.ids);
    Tape tc(DType::f64), td(DType::f64);
    ForwardResult a =
        idpg::forward_idpg(tc, tr, head, g, tmpl, PromptPosition::pos4, rep);
    ForwardResult b =
        idpg::forward_idpg(td, tr, head, g, padded, PromptPosition::pos4, rep);
    CHECK(a.output.values() == b.output.values());
  }
}

TEST_CASE("plain encode is unaffected by generator construction") {
  Rng rng(55);
  Transformer tr = Transformer::init(tiny_bk(), rng, DType::f64, false);
  Tape ta(DType::f64);
  const std::vector<double> before =
      tr.encode(ta, {0, 6, 3}).h_cls.values();
  Rng grng(56);
  PromptGenerator g = PromptGenerator::init(
      tiny_gen(GenFlavor::phm, DepthMode::multi, Sharing::L), grng, DType::f64);
  (void)g;
  Tape tb(DType::f64);
  CHECK(tr.encode(tb, {0, 6, 3}).h_cls.values() == before);
}
