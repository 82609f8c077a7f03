#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "qake/protocol.hpp"

using namespace qake;

namespace {

SessionConfig toy(ProtocolVariant v) {
  return v == ProtocolVariant::qake ? make_session_config(v, 30000, 0.0, 0.02, 16, 32, 0.5)
                                    : make_session_config(v, 20000, 0.0, 0.02, 16, 32, 0.5);
}

SharedSecrets secrets_for(const SessionConfig& cfg, std::uint64_t seed, std::size_t masks = 8) {
  Rng rng(seed);
  return SharedSecrets::generate(cfg.secrets_config(masks), rng);
}

// Replaces the payload of the first message of one kind.
class ReplaceHook final : public MessageHook {
 public:
  ReplaceHook(MessageKind k, std::function<Bytes(const Bytes&)> f) : kind_(k), f_(std::move(f)) {}
  std::optional<ProtocolMessage> on_message(const ProtocolMessage& m, Direction) override {
    if (m.kind != kind_ || done_) return m;
    done_ = true;
    return ProtocolMessage{m.kind, f_(m.payload)};
  }

 private:
  MessageKind kind_;
  std::function<Bytes(const Bytes&)> f_;
  bool done_ = false;
};

}  // namespace

TEST(Labels, AgreementTakesTheMaximum) {
  EXPECT_EQ(label_agreement(3, 5), 5u);
  EXPECT_EQ(label_agreement(5, 3), 5u);
  EXPECT_EQ(label_agreement(2, 2), 2u);
  EXPECT_THROW(label_agreement(0, 2), DomainError);
}

TEST(Sift, ExampleAndEdgeCases) {
  const std::vector<Basis> sent{Basis::Z, Basis::X, Basis::Z, Basis::X};
  EXPECT_EQ(sift(sent, {0, 1, 2}, BitString::from_bits({0, 0, 0})), (IndexSet{0, 2}));
  EXPECT_EQ(sift(sent, {0, 1, 2, 3}, BitString::from_bits({0, 1, 0, 1})), (IndexSet{0, 1, 2, 3}));
  EXPECT_EQ(sift(sent, {0, 1, 2, 3}, BitString::from_bits({1, 0, 1, 0})), IndexSet{});
  EXPECT_THROW(sift(sent, {0, 1}, BitString::from_bits({0})), DimensionError);
  EXPECT_THROW(sift(sent, {7}, BitString::from_bits({0})), DimensionError);
}

TEST(TestSplit, SizeRoundsUp) {
  EXPECT_EQ(test_set_size(0.25, 10), 3u);
  EXPECT_EQ(test_set_size(0.5, 0), 0u);
}

TEST(IndexSets, WireRoundTripAndValidation) {
  Bytes w;
  put_index_set(w, {1, 5, 9});
  std::size_t off = 0;
  EXPECT_EQ(get_index_set(w, off, 10), (IndexSet{1, 5, 9}));
  off = 0;
  EXPECT_THROW(get_index_set(w, off, 9), FormatError);
  Bytes unsorted;
  put_index_set(unsorted, {4, 2});
  off = 0;
  EXPECT_THROW(get_index_set(unsorted, off, 10), FormatError);
}

TEST(BasisGenerator, DeterministicAndSensitive) {
  Rng rng(1);
  const BitString seed = BitString::random(128, rng);
  const std::size_t n = 100000;
  EXPECT_EQ(prng_expand_basis(seed, n), prng_expand_basis(seed, n));
  BitString other = seed;
  other.set(77, !other.get(77));
  const std::size_t differ = (prng_expand_basis(seed, n) ^ prng_expand_basis(other, n)).popcount();
  EXPECT_NEAR(static_cast<double>(differ), n / 2.0, 3 * std::sqrt(n / 4.0));
  EXPECT_THROW(prng_expand_basis(seed, 256), ConfigError);
  EXPECT_THROW(prng_expand_basis(BitString(64), 1000), ConfigError);
}

TEST(ValidationMessage, EncodingProperties) {
  TranscriptFields f;
  f.x_p2 = BitString::from_bits({1, 0, 1});
  f.detected = {0, 2, 3, 5, 6};
  f.bases_p = BitString::from_bits({0, 1, 0, 0, 1});
  f.sifted = {0, 3, 5, 6};
  f.x_p1 = BitString::from_bits({1});
  f.test = {3};
  f.key = {0, 5, 6};
  f.syndrome = {0xaa, 0x55};
  for (auto v : {ProtocolVariant::qake, ProtocolVariant::prng}) {
    const BitString m = validation_message(v, f, 8);
    EXPECT_EQ(m, validation_message(v, f, 8));
    TranscriptFields g = f;
    g.x_p1.set(0, !g.x_p1.get(0));
    EXPECT_NE(validation_message(v, g, 8), m);
    TranscriptFields e = f;
    e.key.clear();
    e.x_p2 = BitString{};
    EXPECT_NO_THROW(validation_message(v, e, 8));
  }
  EXPECT_LE(validation_message(ProtocolVariant::qake, f, 8).size(), h1_capacity_for(8));
}

TEST(Secrets, SerializeRoundTripAndStrictness) {
  const auto cfg = toy(ProtocolVariant::prng);
  const SharedSecrets s = secrets_for(cfg, 3, 3);
  const Bytes b = s.serialize();
  EXPECT_EQ(SharedSecrets::deserialize(b), s);
  Bytes longer = b;
  longer.push_back(0);
  EXPECT_THROW(SharedSecrets::deserialize(longer), FormatError);
  Bytes shorter(b.begin(), b.end() - 1);
  EXPECT_THROW(SharedSecrets::deserialize(shorter), FormatError);

  const auto path = (std::filesystem::temp_directory_path() / "qake_secrets_test.bin").string();
  s.save(path);
  EXPECT_EQ(SharedSecrets::load(path), s);
  std::remove(path.c_str());
}

TEST(MaskLedger, WatermarkAndSingleUse) {
  MaskKeyLedger l;
  l.record(1, 1, 1);
  EXPECT_THROW(l.record(1, 2, 1), DomainError);
  EXPECT_THROW(l.record(2, 1, 2), DomainError);
  EXPECT_NO_THROW(l.record(2, 2, 2));
}

TEST(SessionConfig, Validation) {
  auto cfg = toy(ProtocolVariant::prng);
  cfg.l_theta = 64;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy(ProtocolVariant::qake);
  cfg.syndrome_bytes = 221;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_protocol_variant("bb84"), ConfigError);
}

TEST(Session, HonestRunAgreesOnKeys) {
  for (auto v : {ProtocolVariant::qake, ProtocolVariant::prng}) {
    const auto cfg = toy(v);
    const SharedSecrets s = secrets_for(cfg, 5);
    PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
    const auto o = run_session(cfg, a, b, 17);
    EXPECT_EQ(o.f_a, Outcome::one);
    EXPECT_EQ(o.f_b, Outcome::one);
    ASSERT_TRUE(o.k_a && o.k_b);
    EXPECT_EQ(*o.k_a, *o.k_b);
    EXPECT_EQ(o.k_a->size(), 32u);
    EXPECT_EQ(o.label_a, 1u);
    EXPECT_EQ(o.label_b, 1u);
    EXPECT_FALSE(o.structural_failure);
    if (v == ProtocolVariant::qake) {
      EXPECT_EQ(a.secrets, s);
    } else {
      SharedSecrets expect = s;
      expect.basis_seeds[0] = a.secrets.basis_seeds[0];
      EXPECT_EQ(a.secrets, expect);
      EXPECT_NE(a.secrets.basis_seeds[0], s.basis_seeds[0]);
    }
    EXPECT_EQ(a.secrets, b.secrets);
  }
}

TEST(Session, DeterministicUnderSeed) {
  const auto cfg = toy(ProtocolVariant::qake);
  const SharedSecrets s = secrets_for(cfg, 6);
  PartyState a1 = PartyState::make(Role::alice, s), b1 = PartyState::make(Role::bob, s);
  PartyState a2 = a1, b2 = b1;
  EXPECT_EQ(dump_transcript(run_session(cfg, a1, b1, 3)), dump_transcript(run_session(cfg, a2, b2, 3)));
}

TEST(Session, BlockedPulsesFailBothSides) {
  const auto cfg = toy(ProtocolVariant::qake);
  const SharedSecrets s = secrets_for(cfg, 7);
  PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
  ReplaceHook block(MessageKind::QuantumBlock, [&](const Bytes&) { return serialize(BitString(cfg.n_pulses)); });
  const auto o = run_session(cfg, a, b, 8, &block);
  EXPECT_EQ(o.d_pe, Decision::zero);
  EXPECT_EQ(o.f_a, Outcome::zero);
  EXPECT_EQ(o.f_b, Outcome::zero);
  EXPECT_EQ(o.label_a, 2u);
  EXPECT_EQ(o.label_b, 2u);
}

TEST(Session, HighErrorRateFailsEstimation) {
  auto cfg = toy(ProtocolVariant::qake);
  cfg.ch.qber = 0.5;
  const SharedSecrets s = secrets_for(cfg, 9);
  PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
  const auto o = run_session(cfg, a, b, 10);
  EXPECT_EQ(o.d_pe, Decision::zero);
  EXPECT_EQ(o.f_a, Outcome::zero);
  EXPECT_EQ(o.f_b, Outcome::zero);
}

TEST(Session, TamperedTestAnnouncementIsDetected) {
  const auto cfg = make_session_config(ProtocolVariant::qake, 30000, 0.0, 0.02, 8, 32, 0.5);
  int accepted = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const SharedSecrets s = secrets_for(cfg, 100 + t, 4);
    PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
    // Flip one announced test bit (the last payload byte carries test bits).
    ReplaceHook flip(MessageKind::TestAnnounce, [](Bytes p) {
      p.back() ^= 0x01;
      return p;
    });
    const auto o = run_session(cfg, a, b, 1000 + t, &flip);
    accepted += o.f_b == Outcome::one;
  }
  // Binomial(200, 2^-8) exceeds 5 with probability below 1e-4.
  EXPECT_LE(accepted, 5);
}

TEST(Session, ZeroLabelAnnouncementAborts) {
  const auto cfg = toy(ProtocolVariant::qake);
  const SharedSecrets s = secrets_for(cfg, 11);
  PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
  ReplaceHook zero(MessageKind::LabelAnnounce, [](const Bytes&) { return Bytes{0, 0, 0, 0}; });
  const auto o = run_session(cfg, a, b, 12, &zero);
  EXPECT_TRUE(o.structural_failure);
  EXPECT_EQ(o.f_a, Outcome::zero);
  EXPECT_EQ(o.f_b, Outcome::zero);
}

TEST(Session, RecordedRawDataIsUsedAndRejectedForGenerator) {
  const auto cfg = toy(ProtocolVariant::qake);
  const auto raw = simulate_session(cfg.src, cfg.ch, cfg.n_pulses, 99);
  const SharedSecrets s = secrets_for(cfg, 13);
  PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
  const auto o = run_session(cfg, a, b, 14, nullptr, &raw);
  EXPECT_EQ(o.f_a, Outcome::one);
  const auto pcfg = toy(ProtocolVariant::prng);
  const SharedSecrets ps = secrets_for(pcfg, 15);
  PartyState pa = PartyState::make(Role::alice, ps), pb = PartyState::make(Role::bob, ps);
  EXPECT_THROW(run_session(pcfg, pa, pb, 16, nullptr, &raw), ConfigError);
  PartyState swapped = PartyState::make(Role::bob, s);
  EXPECT_THROW(run_session(cfg, swapped, b, 1), ConfigError);
}

TEST(Session, FailedRoundRetiresMaskKey) {
  auto cfg = toy(ProtocolVariant::qake);
  const SharedSecrets s = secrets_for(cfg, 17);
  PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
  ReplaceHook drop_tag(MessageKind::TagBV, [](Bytes p) {
    p.back() ^= 0x01;
    return p;
  });
  const auto o1 = run_session(cfg, a, b, 18, &drop_tag);
  EXPECT_EQ(o1.f_a, Outcome::zero);
  EXPECT_EQ(o1.f_b, Outcome::one);
  EXPECT_EQ(a.label, 2u);
  EXPECT_EQ(b.label, 1u);
  // Next round agrees on label 2 and uses mask key 2 on both sides.
  const auto o2 = run_session(cfg, a, b, 19);
  EXPECT_EQ(o2.f_a, Outcome::one);
  EXPECT_EQ(o2.f_b, Outcome::one);
  ASSERT_EQ(a.mask_ledger.uses.size(), 2u);
  EXPECT_EQ(a.mask_ledger.uses[1].index, 2u);
  EXPECT_EQ(b.mask_ledger.uses[1].index, 2u);
}

TEST(Session, TranscriptDumpListsEveryMessage) {
  const auto cfg = toy(ProtocolVariant::qake);
  const SharedSecrets s = secrets_for(cfg, 20);
  PartyState a = PartyState::make(Role::alice, s), b = PartyState::make(Role::bob, s);
  const auto o = run_session(cfg, a, b, 21);
  const std::string d = dump_transcript(o);
  for (const char* k : {"LabelAnnounce A>B", "LabelAnnounce B>A", "QuantumBlock A>B", "DetectAndBasis B>A",
                        "SiftAnnounce A>B", "TestAnnounce B>A", "Syndrome A>B", "TagAV A>B", "TagBV B>A"})
    EXPECT_NE(d.find(k), std::string::npos) << k;
}
