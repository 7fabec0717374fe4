#pragma once

#include <algorithm>
#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "octx/classes.hpp"
#include "octx/image_io.hpp"
#include "octx/log.hpp"
#include "octx/tensor.hpp"

namespace octx {

enum class DataErrorKind { io, empty, split, manifest };

class DataError : public std::runtime_error {
public:
    DataError(DataErrorKind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
    DataErrorKind kind() const { return kind_; }

private:
    DataErrorKind kind_;
};

struct SampleRef {
    std::string path;
    ClassLabel label = ClassLabel::CNV;
    std::string patient_id;
    std::optional<long> image_number;

    bool operator==(const SampleRef&) const = default;
};

struct DatasetIndex {
    std::vector<SampleRef> samples;
    std::array<std::size_t, kNumClasses> counts{};
    std::vector<std::string> warnings;

    std::size_t size() const { return samples.size(); }
};

struct Splits {
    std::vector<SampleRef> train;
    std::vector<SampleRef> validation;
    std::vector<SampleRef> test;
    std::uint64_t seed = 0;
};

// "(disease)-(patient id)-(image number)" stems get parsed; anything else keeps
// the bare stem as patient id.
inline SampleRef make_sample_ref(const std::filesystem::path& path, ClassLabel label) {
    static const std::regex pattern(R"(^([A-Za-z]+)-([^-]+)-(\d+)$)");
    SampleRef s{path.string(), label, path.stem().string(), std::nullopt};
    std::smatch m;
    const std::string stem = path.stem().string();
    if (std::regex_match(stem, m, pattern)) {
        s.patient_id = m[2].str();
        s.image_number = std::stol(m[3].str());
    }
    return s;
}

inline bool is_image_file(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".jpeg" || ext == ".jpg" || ext == ".png";
}

inline DatasetIndex index_from_samples(std::vector<SampleRef> samples) {
    DatasetIndex idx;
    idx.samples = std::move(samples);
    for (const auto& s : idx.samples) ++idx.counts[index_of(s.label)];
    return idx;
}

// root/{CNV,DME,DRUSEN,NORMAL}/*.jpeg|*.jpg|*.png, lexicographic order within
// each class folder, classes in label order.
inline DatasetIndex scan_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw DataError(DataErrorKind::io, "dataset root not found: " + root.string());
    DatasetIndex idx;
    auto warn = [&](std::string msg) {
        log_warning(msg);
        idx.warnings.push_back(std::move(msg));
    };

    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(root)) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    for (const auto& e : entries)
        if (fs::is_directory(e) && !parse_class(e.filename().string()))
            warn("skipping unknown subfolder " + e.filename().string());

    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const fs::path dir = root / std::string(kClassNames[c]);
        if (!fs::is_directory(dir)) {
            warn("class folder missing: " + dir.string());
            continue;
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) warn("class folder is empty: " + dir.string());
        for (const auto& f : files) idx.samples.push_back(make_sample_ref(f, static_cast<ClassLabel>(c)));
        idx.counts[c] = files.size();
    }
    if (idx.samples.empty()) throw DataError(DataErrorKind::empty, "no images found under " + root.string());
    return idx;
}

namespace detail {

// Fisher-Yates with a platform-independent bounded draw.
template <typename V>
void seeded_shuffle(V& v, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * i) >> 64);
        std::swap(v[i - 1], v[j]);
    }
}

inline std::uint64_t class_seed(std::uint64_t seed, std::size_t c) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (c + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

struct SplitCounts {
    std::size_t train, validation, test;
};

// Per class: validation = floor(N/5), test = floor(N/5), train = the rest.
inline SplitCounts split_counts(std::size_t n) {
    const std::size_t v = n / 5;
    return {n - 2 * v, v, v};
}

inline Splits split_dataset(const DatasetIndex& index, std::uint64_t seed, bool group_by_patient = false) {
    Splits out;
    out.seed = seed;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::vector<SampleRef> cls;
        for (const auto& s : index.samples)
            if (index_of(s.label) == c) cls.push_back(s);
        if (cls.empty()) continue;
        if (cls.size() < 3)
            throw DataError(DataErrorKind::split, "class " + std::string(kClassNames[c]) + " has " +
                                                      std::to_string(cls.size()) + " samples; at least 3 required");
        const auto counts = split_counts(cls.size());
        if (!group_by_patient) {
            detail::seeded_shuffle(cls, detail::class_seed(seed, c));
            out.validation.insert(out.validation.end(), cls.begin(), cls.begin() + counts.validation);
            out.test.insert(out.test.end(), cls.begin() + counts.validation,
                            cls.begin() + counts.validation + counts.test);
            out.train.insert(out.train.end(), cls.begin() + counts.validation + counts.test, cls.end());
            continue;
        }
        // Whole patients go to one split; sizes land near the per-sample targets.
        std::map<std::string, std::vector<SampleRef>> by_patient;
        for (auto& s : cls) by_patient[s.patient_id].push_back(s);
        std::vector<std::string> patients;
        for (const auto& [p, _] : by_patient) patients.push_back(p);
        detail::seeded_shuffle(patients, detail::class_seed(seed, c));
        std::size_t nv = 0, nt = 0;
        for (const auto& p : patients) {
            auto& group = by_patient[p];
            std::vector<SampleRef>* dst = &out.train;
            if (nv < counts.validation) {
                dst = &out.validation;
                nv += group.size();
            } else if (nt < counts.test) {
                dst = &out.test;
                nt += group.size();
            }
            dst->insert(dst->end(), group.begin(), group.end());
        }
    }
    return out;
}

// path<TAB>label<TAB>split, train then validation then test.
inline void write_split_manifest(const Splits& s, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError(DataErrorKind::io, "cannot write manifest " + path.string());
    auto emit = [&](const std::vector<SampleRef>& v, const char* name) {
        for (const auto& r : v) out << r.path << '\t' << class_name(r.label) << '\t' << name << '\n';
    };
    emit(s.train, "train");
    emit(s.validation, "validation");
    emit(s.test, "test");
}

inline Splits read_split_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(DataErrorKind::io, "cannot read manifest " + path.string());
    Splits s;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto t1 = line.find('\t'), t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw DataError(DataErrorKind::manifest, "malformed manifest line " + std::to_string(lineno));
        const auto label = parse_class(line.substr(t1 + 1, t2 - t1 - 1));
        const std::string split = line.substr(t2 + 1);
        if (!label) throw DataError(DataErrorKind::manifest, "unknown label on manifest line " + std::to_string(lineno));
        auto ref = make_sample_ref(line.substr(0, t1), *label);
        if (split == "train") s.train.push_back(ref);
        else if (split == "validation") s.validation.push_back(ref);
        else if (split == "test") s.test.push_back(ref);
        else throw DataError(DataErrorKind::manifest, "unknown split on manifest line " + std::to_string(lineno));
    }
    return s;
}

// Counts decoded images alive in a stream and blocks the producer once the
// budget is exhausted.
class ResidencyCounter {
public:
    explicit ResidencyCounter(std::size_t limit) : limit_(limit) {}

    // False when cancelled.
    bool acquire(const bool& stop) {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return stop || current_ < limit_; });
        if (stop) return false;
        ++current_;
        peak_ = std::max(peak_, current_);
        return true;
    }
    void release(std::size_t n) {
        {
            std::lock_guard lk(m_);
            current_ -= n;
        }
        cv_.notify_all();
    }
    void wake() {
        std::lock_guard lk(m_);
        cv_.notify_all();
    }
    std::size_t current() const {
        std::lock_guard lk(m_);
        return current_;
    }
    std::size_t peak() const {
        std::lock_guard lk(m_);
        return peak_;
    }
    std::size_t limit() const { return limit_; }
    std::mutex& mutex() { return m_; }

private:
    mutable std::mutex m_;
    std::condition_variable cv_;
    std::size_t limit_;
    std::size_t current_ = 0;
    std::size_t peak_ = 0;
};

// One produced batch. Its images stay counted as resident until it is destroyed.
class Batch {
public:
    Tensor images;  // B x 224 x 224 x 3
    Tensor labels;  // B x 4 one-hot
    std::vector<SampleRef> samples;

    Batch() = default;
    Batch(Batch&&) noexcept = default;
    Batch& operator=(Batch&&) noexcept = default;
    ~Batch() = default;

    std::size_t size() const { return samples.size(); }

private:
    friend class BatchStream;
    struct Lease {
        Lease(std::shared_ptr<ResidencyCounter> c, std::size_t count) : counter(std::move(c)), n(count) {}
        Lease(const Lease&) = delete;
        Lease& operator=(const Lease&) = delete;
        std::shared_ptr<ResidencyCounter> counter;
        std::size_t n = 0;
        ~Lease() {
            if (counter && n) counter->release(n);
        }
    };
    std::unique_ptr<Lease> lease_;
};

struct StreamOptions {
    std::size_t prefetch_depth = 8;
    bool shuffle = true;
    std::function<Tensor(const SampleRef&)> loader;  // defaults to load_and_preprocess
};

// Ordered batch stream over a sample list. A producer thread decodes images
// ahead of the consumer; at most batch_size + prefetch_depth decoded images
// exist at once. Samples that fail to decode are skipped with a warning.
class BatchStream {
public:
    BatchStream(std::vector<SampleRef> samples, std::size_t batch_size, std::uint64_t epoch_seed,
                StreamOptions opts = {})
        : samples_(std::move(samples)), batch_size_(batch_size), opts_(std::move(opts)) {
        if (batch_size_ < 1) throw ParameterError("batch_size must be >= 1");
        if (!opts_.loader) opts_.loader = [](const SampleRef& s) { return load_and_preprocess(s.path); };
        if (opts_.shuffle) detail::seeded_shuffle(samples_, epoch_seed);
        counter_ = std::make_shared<ResidencyCounter>(batch_size_ + opts_.prefetch_depth);
        producer_ = std::thread([this] { produce(); });
    }

    BatchStream(const BatchStream&) = delete;
    BatchStream& operator=(const BatchStream&) = delete;

    ~BatchStream() {
        {
            std::lock_guard lk(m_);
            stop_ = true;
        }
        {
            std::lock_guard lk(counter_->mutex());
            stop_counter_ = true;
        }
        counter_->wake();
        cv_.notify_all();
        if (producer_.joinable()) producer_.join();
        // Leases of undelivered images.
        std::size_t pending = 0;
        for (const auto& it : queue_)
            if (it.image) ++pending;
        counter_->release(pending);
    }

    // Sample order for this epoch.
    const std::vector<SampleRef>& order() const { return samples_; }

    std::optional<Batch> next() {
        std::vector<std::pair<Tensor, SampleRef>> got;
        while (got.size() < batch_size_) {
            std::unique_lock lk(m_);
            cv_.wait(lk, [&] { return !queue_.empty() || done_; });
            if (queue_.empty()) break;
            Item it = std::move(queue_.front());
            queue_.pop_front();
            lk.unlock();
            if (it.image) got.emplace_back(std::move(*it.image), std::move(it.sample));
        }
        if (got.empty()) return std::nullopt;

        Batch b;
        const std::size_t B = got.size();
        const std::size_t n = got.front().first.size();
        b.images = Tensor({B, got.front().first.dim(0), got.front().first.dim(1), got.front().first.dim(2)});
        b.labels = Tensor({B, kNumClasses});
        for (std::size_t i = 0; i < B; ++i) {
            std::copy(got[i].first.data().begin(), got[i].first.data().end(), b.images.raw() + i * n);
            b.labels[i * kNumClasses + index_of(got[i].second.label)] = 1.0f;
            b.samples.push_back(std::move(got[i].second));
        }
        b.lease_ = std::make_unique<Batch::Lease>(counter_, B);
        return b;
    }

    std::size_t peak_resident() const { return counter_->peak(); }
    std::size_t resident() const { return counter_->current(); }
    std::size_t resident_limit() const { return counter_->limit(); }
    std::size_t skipped() const {
        std::lock_guard lk(m_);
        return skipped_;
    }

private:
    struct Item {
        std::optional<Tensor> image;
        SampleRef sample;
    };

    void produce() {
        for (const auto& s : samples_) {
            if (!counter_->acquire(stop_counter_)) break;
            Item it{std::nullopt, s};
            try {
                it.image = opts_.loader(s);
            } catch (const std::exception& e) {
                log_warning(std::string("skipping sample: ") + e.what());
                counter_->release(1);
                std::lock_guard lk(m_);
                ++skipped_;
            }
            {
                std::lock_guard lk(m_);
                if (stop_) {
                    if (it.image) counter_->release(1);
                    break;
                }
                queue_.push_back(std::move(it));
            }
            cv_.notify_all();
        }
        {
            std::lock_guard lk(m_);
            done_ = true;
        }
        cv_.notify_all();
    }

    std::vector<SampleRef> samples_;
    std::size_t batch_size_;
    StreamOptions opts_;
    std::shared_ptr<ResidencyCounter> counter_;

    mutable std::mutex m_;
    std::condition_variable cv_;
    std::deque<Item> queue_;
    bool done_ = false;
    bool stop_ = false;
    bool stop_counter_ = false;  // guarded by counter_->mutex()
    std::size_t skipped_ = 0;
    std::thread producer_;
};

}  // namespace octx
