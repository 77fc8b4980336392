#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dfq/dataset.hpp"
#include "dfq/model_io.hpp"
#include "dfq/quantizer.hpp"
#include "dfq/zoo.hpp"
#include "support.hpp"

namespace dfq {
namespace {

std::string model_bytes(const ModelGraph& m) {
  std::ostringstream os(std::ios::binary);
  write_model(os, m);
  return os.str();
}

ModelGraph from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_model(is);
}

FormatError::Kind failure_kind(const std::string& bytes) {
  try {
    from_bytes(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a FormatError";
  return FormatError::Kind::Io;
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("dfq_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST(ModelIo, RoundTripIsBitExact) {
  for (const char* name : {"tiny", "resnet"}) {
    const ModelGraph m = make_zoo_model(name, 10, 4);
    const std::string bytes = model_bytes(m);
    const ModelGraph back = from_bytes(bytes);
    EXPECT_TRUE(identical(m, back)) << name;
    EXPECT_EQ(model_bytes(back), bytes) << name;
  }
}

TEST(ModelIo, RejectsCorruption) {
  const std::string good = model_bytes(test::small_model());

  std::string magic = good;
  magic[0] = 'X';
  EXPECT_EQ(failure_kind(magic), FormatError::Kind::BadMagic);

  std::string version = good;
  version[4] = static_cast<char>(kModelVersion + 1);
  EXPECT_EQ(failure_kind(version), FormatError::Kind::VersionMismatch);

  EXPECT_EQ(failure_kind(good.substr(0, good.size() - 3)), FormatError::Kind::Truncated);
  EXPECT_EQ(failure_kind(good.substr(0, 10)), FormatError::Kind::Truncated);
  EXPECT_EQ(failure_kind(std::string()), FormatError::Kind::Truncated);
}

TEST_F(TempDir, LoadRejectsTrailingBytesAndMissingFiles) {
  const auto path = dir_ / "m.dfqm";
  save_model(path, test::small_model());
  EXPECT_TRUE(identical(load_model(path), test::small_model()));
  {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os << "junk";
  }
  EXPECT_THROW(load_model(path), FormatError);
  EXPECT_THROW(load_model(dir_ / "missing.dfqm"), FormatError);
}

TEST(DatasetIo, RoundTripIsBitExact) {
  const Dataset ds = make_desk_dataset(4, 5, 11);
  std::ostringstream os(std::ios::binary);
  write_dataset(os, ds);
  std::istringstream is(os.str(), std::ios::binary);
  const Dataset back = read_dataset(is);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.sample_shape, ds.sample_shape);
  EXPECT_EQ(back.class_count, 4);
  ASSERT_EQ(back.images.size(), ds.images.size());
  EXPECT_EQ(std::memcmp(back.images.data(), ds.images.data(), sizeof(float) * static_cast<std::size_t>(ds.images.size())), 0);
}

TEST(DatasetIo, HeaderLayout) {
  const Dataset ds = make_desk_dataset(3, 2, 1);
  std::ostringstream os(std::ios::binary);
  write_dataset(os, ds);
  const std::string bytes = os.str();
  ASSERT_GE(bytes.size(), 28u);
  EXPECT_EQ(bytes.substr(0, 4), "DFQD");
  auto u32 = [&](std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + at, 4);
    return v;
  };
  EXPECT_EQ(u32(4), kDatasetVersion);
  EXPECT_EQ(u32(8), 6u);
  EXPECT_EQ(u32(12), 3u);
  EXPECT_EQ(u32(16), 3u);
  EXPECT_EQ(u32(20), 32u);
  EXPECT_EQ(u32(24), 32u);
  EXPECT_EQ(bytes.size(), 28u + 6u * (2u + 4u * 3u * 32u * 32u));
}

TEST(DatasetIo, RejectsOutOfRangeLabel) {
  Dataset ds = make_desk_dataset(3, 1, 1);
  std::ostringstream os(std::ios::binary);
  write_dataset(os, ds);
  std::string bytes = os.str();
  bytes[28] = 9;  // first label
  std::istringstream is(bytes, std::ios::binary);
  EXPECT_THROW(read_dataset(is), FormatError);
}

TEST(Dataset, DeterministicPerSeed) {
  const Dataset a = make_desk_dataset(10, 3, 5), b = make_desk_dataset(10, 3, 5), c = make_desk_dataset(10, 3, 6);
  EXPECT_TRUE((a.images == b.images).all());
  EXPECT_FALSE((a.images == c.images).all());
  EXPECT_EQ(a.size(), 30);
  for (Index i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[static_cast<std::size_t>(i)], i % 10);
}

TEST(Dataset, RejectsBadArguments) {
  EXPECT_THROW(make_desk_dataset(1, 10, 0), ContractError);
  EXPECT_THROW(make_desk_dataset(10, 0, 0), ContractError);
  const Dataset ds = make_desk_dataset(2, 2, 0);
  EXPECT_THROW(ds.batch(3, 2), ContractError);
}

TEST(QuantModelIo, RoundTrip) {
  const ModelGraph m = test::small_model();
  QuantModel qm = quantize_weights(m, 4);
  const auto sites = activation_sites(m);
  qm.act_quant[sites[0]] = QuantParams(0.0, 3.25, 4);

  std::ostringstream os(std::ios::binary);
  write_quant_model(os, qm);
  std::istringstream is(os.str(), std::ios::binary);
  const QuantModel back = read_quant_model(is);
  EXPECT_TRUE(identical(back.base, m));
  EXPECT_EQ(back.bits, 4);
  EXPECT_TRUE(back.enabled);
  ASSERT_EQ(back.weight_quant.size(), qm.weight_quant.size());
  for (const auto& [layer, p] : qm.weight_quant) {
    EXPECT_EQ(back.weight_quant.at(layer).l(), p.l());
    EXPECT_EQ(back.weight_quant.at(layer).u(), p.u());
  }
  ASSERT_TRUE(back.act_quant.at(sites[0]).has_value());
  EXPECT_EQ(back.act_quant.at(sites[0])->u(), 3.25);
  EXPECT_FALSE(back.act_quant.at(sites[1]).has_value());
  EXPECT_FALSE(back.calibrated());
}

TEST_F(TempDir, PlainModelFileIsNotAQuantModel) {
  const auto path = dir_ / "plain.dfqm";
  save_model(path, test::small_model());
  EXPECT_THROW(load_quant_model(path), FormatError);
  const auto qpath = dir_ / "q.dfqm";
  save_quant_model(qpath, quantize_weights(test::small_model(), 8));
  EXPECT_TRUE(identical(load_model(qpath), test::small_model()));
  EXPECT_EQ(load_quant_model(qpath).bits, 8);
}

}  // namespace
}  // namespace dfq
