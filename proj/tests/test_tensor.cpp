#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <thread>
#include <vector>

#include "revflow/errors.h"
#include "revflow/kernels.h"
#include "revflow/memory_meter.h"
#include "revflow/nft_io.h"
#include "revflow/oracle.h"
#include "revflow/rng.h"
#include "revflow/tensor.h"
#include "support.h"

using namespace revflow;

TEST_CASE("zeros and full") {
  const Tensor<float> z = Tensor<float>::zeros({1, 1, 2, 2});
  CHECK(z.size() == 4);
  for (float v : z.values()) CHECK(v == 0.0f);
  const Tensor<double> f = Tensor<double>::full({1, 2, 1, 1}, 3.5);
  CHECK(f[0] == 3.5);
  CHECK(f[1] == 3.5);
}

TEST_CASE("allocation reports payload bytes to the meter") {
  auto& meter = MemoryMeter::global();
  const std::size_t before = meter.live();
  {
    const Tensor<float> t = Tensor<float>::zeros({2, 3, 4, 4});
    CHECK(t.size() == 96);
    CHECK(meter.live() == before + 384);
    CHECK(meter.peak() >= meter.live());
  }
  CHECK(meter.live() == before);
}

TEST_CASE("invalid shapes throw") {
  CHECK_THROWS_AS(Tensor<float>(Shape{0, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 0, 3}), ShapeError);
  const std::size_t huge = std::numeric_limits<std::size_t>::max() / 2;
  CHECK_THROWS_AS(Tensor<float>(Shape{huge, 4, 1, 1}), ShapeError);
  std::vector<float> three(3);
  CHECK_THROWS_AS(Tensor<float>::from_values({1, 1, 2, 2}, three), ShapeError);
}

TEST_CASE("copies and moves keep the meter balanced") {
  test::MeterBalance guard;
  {
    Tensor<double> a = Tensor<double>::full({2, 2, 2, 2}, 1.0);
    Tensor<double> b = a;
    Tensor<double> c = std::move(a);
    CHECK(a.empty());
    b = c;
    c = std::move(b);
    Tensor<double> d;
    d = c;
  }
  CHECK(guard.leaked() == 0);
}

TEST_CASE("rng is deterministic and well distributed") {
  Rng a(7), b(7), c(8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);

  Rng r(1);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);

  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) ++counts[r.below(5)];
  for (int k : counts) CHECK(std::abs(k - 10000) < 500);
}

TEST_CASE("randn repeats for a repeated seed") {
  Rng a(7), b(7);
  const Tensor<float> x = Tensor<float>::randn({2, 3, 4, 4}, a);
  const Tensor<float> y = Tensor<float>::randn({2, 3, 4, 4}, b);
  CHECK(std::memcmp(x.data(), y.data(), x.bytes()) == 0);
  Rng c(1);
  const Tensor<float> one = Tensor<float>::randn({1, 1, 1, 1}, c);
  CHECK(std::isfinite(one[0]));
}

TEST_CASE("map and zip") {
  const Tensor<double> zero = Tensor<double>::zeros({1, 1, 1, 1});
  CHECK(map(zero, Unary::exp())[0] == 1.0);

  std::vector<double> av{1, 2}, bv{3, 4}, rv{-1, 2};
  const auto a = Tensor<double>::from_values({1, 2, 1, 1}, av);
  const auto b = Tensor<double>::from_values({1, 2, 1, 1}, bv);
  const auto prod = zip(a, b, Binary::Mul);
  CHECK(prod[0] == 3.0);
  CHECK(prod[1] == 8.0);
  const auto relu = map(Tensor<double>::from_values({1, 2, 1, 1}, rv), Unary::relu());
  CHECK(relu[0] == 0.0);
  CHECK(relu[1] == 2.0);

  CHECK_THROWS_AS(zip(a, Tensor<double>::zeros({1, 1, 2, 1}), Binary::Add), ShapeError);
}

TEST_CASE("channel split and concat") {
  Rng rng(3);
  const auto x = Tensor<float>::randn({2, 4, 3, 3}, rng);
  for (std::size_t k = 1; k < 4; ++k) {
    const auto [lo, hi] = channel_split(x, k);
    CHECK(lo.shape() == Shape{2, k, 3, 3});
    const auto back = channel_concat(lo, hi);
    CHECK(std::memcmp(back.data(), x.data(), x.bytes()) == 0);
  }

  std::vector<double> abc{1.5, 2.5, 3.5};
  const auto [first, rest] = channel_split(Tensor<double>::from_values({1, 3, 1, 1}, abc), 1);
  CHECK(first.size() == 1);
  CHECK(first[0] == 1.5);
  CHECK(rest[0] == 2.5);
  CHECK(rest[1] == 3.5);

  const auto joined =
      channel_concat(Tensor<float>::zeros({1, 1, 2, 2}), Tensor<float>::zeros({1, 3, 2, 2}));
  CHECK(joined.shape() == Shape{1, 4, 2, 2});

  CHECK_THROWS_AS(channel_split(x, 0), ShapeError);
  CHECK_THROWS_AS(channel_split(x, 4), ShapeError);
  CHECK_THROWS_AS(channel_concat(x, Tensor<float>::zeros({2, 1, 2, 3})), ShapeError);
}

TEST_CASE("conv3x3 hand-computed cases") {
  Rng rng(5);
  const auto x = Tensor<double>::randn({2, 1, 5, 4}, rng);
  auto w = Tensor<double>::zeros({1, 1, 3, 3});
  w[4] = 1.0;
  const auto bias = Tensor<double>::zeros({1, 1, 1, 1});
  CHECK(max_abs_diff(conv3x3(x, w, bias), x) == 0.0);

  const auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  const auto y = conv3x3(ones, Tensor<double>::full({1, 1, 3, 3}, 1.0), bias);
  CHECK(y(0, 0, 1, 1) == 9.0);
  CHECK(y(0, 0, 0, 0) == 4.0);
  CHECK(y(0, 0, 2, 2) == 4.0);
  CHECK(y(0, 0, 0, 1) == 6.0);

  CHECK_THROWS_AS(conv3x3(Tensor<double>::zeros({1, 2, 3, 3}), w, bias), ShapeError);
}

TEST_CASE("conv3x3 backward matches finite differences") {
  Rng rng(11);
  const auto x = Tensor<double>::randn({1, 2, 4, 4}, rng);
  auto w = Tensor<double>::randn({3, 2, 3, 3}, rng);
  auto b = Tensor<double>::randn({1, 3, 1, 1}, rng);
  const auto dy = Tensor<double>::randn({1, 3, 4, 4}, rng);
  auto loss = [&](const Tensor<double>& xi) { return dot(conv3x3(xi, w, b), dy); };
  const auto g = conv3x3_backward(x, w, dy);

  auto fd_w = oracle::fd_gradient(w.values(), [&] { return loss(x); }, 1e-5);
  CHECK(oracle::max_relative_error(fd_w, test::to_vec(g.dweight), 1e-8) < 1e-5);
  auto fd_b = oracle::fd_gradient(b.values(), [&] { return loss(x); }, 1e-5);
  CHECK(oracle::max_relative_error(fd_b, test::to_vec(g.dbias), 1e-8) < 1e-5);
  Tensor<double> xv = x;
  auto fd_x = oracle::fd_gradient(xv.values(), [&] { return loss(xv); }, 1e-5);
  CHECK(oracle::max_relative_error(fd_x, test::to_vec(g.dx), 1e-8) < 1e-5);
}

TEST_CASE("kernels are deterministic") {
  Rng rng(2);
  const auto x = Tensor<float>::randn({2, 3, 6, 6}, rng);
  const auto w = Tensor<float>::randn({4, 3, 3, 3}, rng);
  const auto b = Tensor<float>::randn({1, 4, 1, 1}, rng);
  const auto y1 = conv3x3(x, w, b);
  const auto y2 = conv3x3(x, w, b);
  CHECK(std::memcmp(y1.data(), y2.data(), y1.bytes()) == 0);
}

TEST_CASE("pixel_matmul") {
  Rng rng(4);
  const auto x = Tensor<double>::randn({2, 3, 2, 3}, rng);
  auto eye = Tensor<double>::zeros({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK(max_abs_diff(pixel_matmul(x, eye), x) == 0.0);

  const auto x2 = Tensor<double>::randn({1, 2, 2, 2}, rng);
  std::vector<double> swap{0, 1, 1, 0};
  const auto y2 = pixel_matmul(x2, Tensor<double>::from_values({2, 2, 1, 1}, swap));
  CHECK(max_abs_diff(channel_slice(y2, 0, 1), channel_slice(x2, 1, 2)) == 0.0);
  CHECK(max_abs_diff(channel_slice(y2, 1, 2), channel_slice(x2, 0, 1)) == 0.0);

  const auto w = Tensor<double>::randn({3, 3, 1, 1}, rng);
  const auto y = pixel_matmul(x, w);
  double worst = 0.0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t px = 0; px < 3; ++px)
        for (std::size_t i = 0; i < 3; ++i) {
          double ref = 0.0;
          for (std::size_t j = 0; j < 3; ++j) ref += w[i * 3 + j] * x(n, j, h, px);
          worst = std::max(worst, std::abs(ref - y(n, i, h, px)));
        }
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(pixel_matmul(x, Tensor<double>::zeros({2, 2, 1, 1})), ShapeError);
}

TEST_CASE("memory limit throws without corrupting counters") {
  auto& meter = MemoryMeter::global();
  const std::size_t live = meter.live();
  {
    ScopedMemoryLimit limit(live + 100);
    CHECK_NOTHROW(Tensor<float>(Shape{1, 1, 5, 5}));
    CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 6, 5}), BudgetExceeded);
    CHECK(meter.live() == live);
  }
  CHECK_FALSE(meter.limit().has_value());
  CHECK_NOTHROW(Tensor<float>(Shape{1, 1, 100, 100}));
}

TEST_CASE("reset_peak sets peak to live") {
  auto& meter = MemoryMeter::global();
  { const Tensor<double> big(Shape{1, 1, 64, 64}); }
  CHECK(meter.peak() >= meter.live() + 64 * 64 * 8);
  meter.reset_peak();
  CHECK(meter.peak() == meter.live());
}

TEST_CASE("meter tolerates concurrent reports") {
  test::MeterBalance guard;
  const auto count_before = MemoryMeter::global().allocation_count();
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([] {
      for (int i = 0; i < 2000; ++i) {
        Tensor<float> a(Shape{1, 1, 3, 7});
        Tensor<double> b = Tensor<double>::full({1, 2, 2, 2}, 1.0);
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK(guard.leaked() == 0);
  CHECK(MemoryMeter::global().allocation_count() - count_before == 16000);
}

TEST_CASE("NFT1 layout and round trip") {
  Rng rng(9);
  const auto t = Tensor<double>::randn({2, 3, 1, 2}, rng);
  const auto bytes = encode_nft(t);
  REQUIRE(bytes.size() == kNftHeaderBytes + 12 * 8);
  CHECK(std::memcmp(bytes.data(), "NFT1", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 4);
  CHECK(le::get_u64(bytes.data() + 6) == 2);
  CHECK(le::get_u64(bytes.data() + 14) == 3);
  CHECK(le::get_u64(bytes.data() + 22) == 1);
  CHECK(le::get_u64(bytes.data() + 30) == 2);
  double first;
  std::memcpy(&first, bytes.data() + kNftHeaderBytes, 8);
  CHECK(first == t[0]);

  const auto back = decode_nft<double>(bytes);
  CHECK(back.shape() == t.shape());
  CHECK(std::memcmp(back.data(), t.data(), t.bytes()) == 0);
  CHECK(encode_nft(Tensor<float>::zeros({1, 1, 1, 1}))[4] == 0);
}

TEST_CASE("NFT1 decode errors carry offsets") {
  const auto good = encode_nft(Tensor<float>::full({1, 2, 2, 2}, 1.0f));
  auto bad = good;
  bad[0] = 'X';
  try {
    decode_nft<float>(bad, 100);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 100);
  }
  CHECK_THROWS_AS(decode_nft<double>(good), FormatError);
  const std::vector<std::uint8_t> truncated(good.begin(), good.end() - 1);
  CHECK_THROWS_AS(decode_nft<float>(truncated), FormatError);
  auto bad_ndim = good;
  bad_ndim[5] = 3;
  try {
    decode_nft<float>(bad_ndim);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 5);
  }
}
