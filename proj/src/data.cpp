#include "crgan/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "crgan/image_io.hpp"

namespace crgan {

namespace {

constexpr const char* kCorpusFormat = "crgan-corpus/1";

std::vector<int64_t> permutation(int64_t n, RngStream rng)
{
    std::vector<int64_t> order(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    for (int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    return order;
}

std::string identity_dir_name(int identity)
{
    std::ostringstream os;
    os << "identity_";
    os.width(4);
    os.fill('0');
    os << identity;
    return os.str();
}

std::vector<int64_t> eligible_indices(const LabeledCorpus& corpus)
{
    std::vector<int64_t> out;
    for (int64_t i = 0; i < corpus.size(); ++i) {
        if (corpus.view_count(corpus.identity(i)) >= 2) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<int> shuffled_identities(const LabeledCorpus& corpus, std::uint64_t seed, std::string_view purpose)
{
    auto ids = corpus.identity_ids();
    const auto order = permutation(static_cast<int64_t>(ids.size()), RngStream(seed).split(purpose));
    std::vector<int> out;
    out.reserve(ids.size());
    for (int64_t k : order) {
        out.push_back(ids[static_cast<std::size_t>(k)]);
    }
    return out;
}

} // namespace

LabeledCorpus::LabeledCorpus(torch::Tensor images, std::vector<int> views, std::vector<int> identities)
    : images_(std::move(images)), views_(std::move(views)), identities_(std::move(identities))
{
    if (views_.size() != identities_.size() || images_.size(0) != static_cast<int64_t>(views_.size())) {
        throw DomainError("corpus images, views and identities differ in length");
    }
    if (images_.dim() != 4 || images_.size(1) != kImageChannels || images_.size(2) != images_.size(3)) {
        throw DomainError("corpus images must be [N, 3, S, S]");
    }
    for (std::size_t i = 0; i < views_.size(); ++i) {
        ViewCode check(views_[i]);
        if (identities_[i] < 0) {
            throw DomainError("identity ids must be nonnegative");
        }
        by_identity_[identities_[i]].push_back(static_cast<int64_t>(i));
    }
}

LabeledSample LabeledCorpus::sample(int64_t i) const
{
    return {Image(images_[i]), ViewCode(view(i)), identity(i)};
}

std::vector<int> LabeledCorpus::identity_ids() const
{
    std::vector<int> ids;
    ids.reserve(by_identity_.size());
    for (const auto& [id, _] : by_identity_) {
        ids.push_back(id);
    }
    return ids;
}

const std::vector<int64_t>& LabeledCorpus::indices_of(int identity) const
{
    const auto it = by_identity_.find(identity);
    if (it == by_identity_.end()) {
        throw DomainError("identity " + std::to_string(identity) + " not in corpus");
    }
    return it->second;
}

int LabeledCorpus::view_count(int identity) const
{
    std::set<int> bins;
    for (int64_t i : indices_of(identity)) {
        bins.insert(view(i));
    }
    return static_cast<int>(bins.size());
}

LabeledCorpus LabeledCorpus::subset(const std::vector<int64_t>& indices) const
{
    std::vector<int> v;
    std::vector<int> ids;
    for (int64_t i : indices) {
        v.push_back(view(i));
        ids.push_back(identity(i));
    }
    return LabeledCorpus(gather_images(indices), std::move(v), std::move(ids));
}

torch::Tensor LabeledCorpus::gather_images(const std::vector<int64_t>& indices) const
{
    return images_.index_select(0, torch::tensor(indices, torch::kInt64));
}

torch::Tensor LabeledCorpus::gather_views(const std::vector<int64_t>& indices) const
{
    std::vector<int64_t> v;
    v.reserve(indices.size());
    for (int64_t i : indices) {
        v.push_back(view(i));
    }
    return torch::tensor(v, torch::kInt64);
}

UnlabeledCorpus::UnlabeledCorpus(torch::Tensor images) : images_(std::move(images))
{
    if (images_.dim() != 4 || images_.size(1) != kImageChannels || images_.size(2) != images_.size(3)) {
        throw DomainError("unlabeled images must be [N, 3, S, S]");
    }
}

torch::Tensor UnlabeledCorpus::gather_images(const std::vector<int64_t>& indices) const
{
    return images_.index_select(0, torch::tensor(indices, torch::kInt64));
}

std::pair<int64_t, int64_t> sample_identity_pair_indices(const LabeledCorpus& corpus, int identity, RngStream& rng)
{
    const auto& members = corpus.indices_of(identity);
    if (corpus.view_count(identity) < 2) {
        throw DomainError("identity " + std::to_string(identity) + " has fewer than two views");
    }
    const int64_t first = members[rng.below(members.size())];
    return {first, sample_partner(corpus, first, rng)};
}

std::pair<LabeledSample, LabeledSample> sample_identity_pair(const LabeledCorpus& corpus, int identity, RngStream& rng)
{
    const auto [i, j] = sample_identity_pair_indices(corpus, identity, rng);
    return {corpus.sample(i), corpus.sample(j)};
}

int64_t sample_partner(const LabeledCorpus& corpus, int64_t index, RngStream& rng)
{
    std::vector<int64_t> candidates;
    for (int64_t k : corpus.indices_of(corpus.identity(index))) {
        if (corpus.view(k) != corpus.view(index)) {
            candidates.push_back(k);
        }
    }
    if (candidates.empty()) {
        throw DomainError("identity " + std::to_string(corpus.identity(index)) + " has no second view");
    }
    return candidates[rng.below(candidates.size())];
}

std::pair<LabeledCorpus, LabeledCorpus> split_corpus(const LabeledCorpus& corpus, double train_fraction, std::uint64_t seed)
{
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("train fraction must lie in (0, 1)");
    }
    const auto ids = shuffled_identities(corpus, seed, "split");
    if (ids.size() < 2) {
        throw ConfigError("splitting needs at least two identities");
    }
    const auto n = static_cast<int64_t>(ids.size());
    const int64_t n_train = std::clamp<int64_t>(std::llround(train_fraction * static_cast<double>(n)), 1, n - 1);
    const std::set<int> train_ids(ids.begin(), ids.begin() + n_train);
    std::vector<int64_t> train;
    std::vector<int64_t> held;
    for (int64_t i = 0; i < corpus.size(); ++i) {
        (train_ids.contains(corpus.identity(i)) ? train : held).push_back(i);
    }
    return {corpus.subset(train), corpus.subset(held)};
}

std::pair<LabeledCorpus, UnlabeledCorpus> strip_labels(const LabeledCorpus& corpus, double fraction, std::uint64_t seed)
{
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw ConfigError("strip fraction must lie in [0, 1)");
    }
    const auto ids = shuffled_identities(corpus, seed, "strip");
    const auto n_strip = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
    const std::set<int> stripped(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_strip));
    std::vector<int64_t> keep;
    std::vector<int64_t> drop;
    for (int64_t i = 0; i < corpus.size(); ++i) {
        (stripped.contains(corpus.identity(i)) ? drop : keep).push_back(i);
    }
    UnlabeledCorpus unlabeled;
    if (!drop.empty()) {
        unlabeled = UnlabeledCorpus(corpus.gather_images(drop));
    }
    return {corpus.subset(keep), unlabeled};
}

PairBatch make_pair_batch(const LabeledCorpus& corpus, const std::vector<std::pair<int64_t, int64_t>>& pairs)
{
    std::vector<int64_t> is;
    std::vector<int64_t> js;
    PairBatch batch;
    for (const auto& [i, j] : pairs) {
        is.push_back(i);
        js.push_back(j);
        batch.identity_i.push_back(corpus.identity(i));
        batch.identity_j.push_back(corpus.identity(j));
    }
    batch.x_i = corpus.gather_images(is);
    batch.v_i = corpus.gather_views(is);
    batch.x_j = corpus.gather_images(js);
    batch.v_j = corpus.gather_views(js);
    return batch;
}

PairSampler::PairSampler(const LabeledCorpus& corpus, int batch_size, RngStream rng)
    : corpus_(&corpus), batch_size_(batch_size), rng_(rng), eligible_(eligible_indices(corpus))
{
    if (eligible_.empty()) {
        throw ConfigError("corpus has no identity with at least two views");
    }
    batch_size_ = std::min<int>(batch_size_, static_cast<int>(eligible_.size()));
}

int64_t PairSampler::steps_per_epoch() const
{
    return std::max<int64_t>(1, static_cast<int64_t>(eligible_.size()) / batch_size_);
}

const std::vector<int64_t>& PairSampler::order(int64_t epoch)
{
    if (epoch != cached_epoch_) {
        cached_order_ = permutation(static_cast<int64_t>(eligible_.size()), rng_.split("epoch/" + std::to_string(epoch)));
        cached_epoch_ = epoch;
    }
    return cached_order_;
}

PairBatch PairSampler::batch(int64_t epoch, int64_t index)
{
    const auto& ord = order(epoch);
    auto pair_rng = rng_.split("pairs/" + std::to_string(epoch) + "/" + std::to_string(index));
    std::vector<std::pair<int64_t, int64_t>> pairs;
    for (int64_t k = 0; k < batch_size_; ++k) {
        const int64_t i = eligible_[static_cast<std::size_t>(ord[static_cast<std::size_t>(index * batch_size_ + k)])];
        pairs.emplace_back(i, sample_partner(*corpus_, i, pair_rng));
    }
    return make_pair_batch(*corpus_, pairs);
}

MixedSampler::MixedSampler(const LabeledCorpus& labeled, const UnlabeledCorpus& unlabeled, int batch_size, RngStream rng)
    : labeled_(&labeled), unlabeled_(&unlabeled), batch_size_(batch_size), rng_(rng)
{
    if (!labeled.empty()) {
        eligible_ = eligible_indices(labeled);
    }
    const int64_t total = static_cast<int64_t>(eligible_.size()) + unlabeled.size();
    if (total == 0) {
        throw ConfigError("self-supervised stage has no usable samples");
    }
    batch_size_ = static_cast<int>(std::min<int64_t>(batch_size_, total));
}

int64_t MixedSampler::steps_per_epoch() const
{
    const int64_t total = static_cast<int64_t>(eligible_.size()) + unlabeled_->size();
    return std::max<int64_t>(1, total / batch_size_);
}

MixedBatch MixedSampler::batch(int64_t epoch, int64_t index)
{
    const int64_t n_labeled = static_cast<int64_t>(eligible_.size());
    if (epoch != cached_epoch_) {
        cached_order_ = permutation(n_labeled + unlabeled_->size(), rng_.split("epoch/" + std::to_string(epoch)));
        cached_epoch_ = epoch;
    }
    auto pair_rng = rng_.split("pairs/" + std::to_string(epoch) + "/" + std::to_string(index));
    std::vector<std::pair<int64_t, int64_t>> pairs;
    MixedBatch out;
    for (int64_t k = 0; k < batch_size_; ++k) {
        const int64_t entry = cached_order_[static_cast<std::size_t>(index * batch_size_ + k)];
        if (entry < n_labeled) {
            const int64_t i = eligible_[static_cast<std::size_t>(entry)];
            pairs.emplace_back(i, sample_partner(*labeled_, i, pair_rng));
        } else {
            out.unlabeled_indices.push_back(entry - n_labeled);
        }
    }
    if (!pairs.empty()) {
        out.labeled = make_pair_batch(*labeled_, pairs);
    }
    if (!out.unlabeled_indices.empty()) {
        out.unlabeled = unlabeled_->gather_images(out.unlabeled_indices);
    }
    return out;
}

void save_corpus(const LabeledCorpus& corpus, const std::filesystem::path& dir, std::uint64_t corpus_seed)
{
    std::filesystem::create_directories(dir);
    const auto ids = corpus.identity_ids();
    for (int id : ids) {
        const auto sub = dir / identity_dir_name(id);
        std::filesystem::create_directories(sub);
        for (int64_t i : corpus.indices_of(id)) {
            write_png(sub / ("view_" + std::to_string(corpus.view(i)) + ".png"), Image(corpus.images()[i]));
        }
    }
    nlohmann::ordered_json manifest;
    manifest["format"] = kCorpusFormat;
    manifest["corpus_seed"] = corpus_seed;
    manifest["identities"] = ids.size();
    manifest["image_size"] = corpus.image_size();
    manifest["views"] = kViewCount;
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << "\n";
    if (!out) {
        throw std::runtime_error("cannot write corpus manifest in " + dir.string());
    }
}

LabeledCorpus load_corpus(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw ConfigError("no corpus manifest in " + dir.string());
    }
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != kCorpusFormat) {
        throw ConfigError("unrecognized corpus format in " + dir.string());
    }
    std::vector<torch::Tensor> images;
    std::vector<int> views;
    std::vector<int> identities;
    std::vector<std::filesystem::path> id_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_directory() && entry.path().filename().string().starts_with("identity_")) {
            id_dirs.push_back(entry.path());
        }
    }
    std::sort(id_dirs.begin(), id_dirs.end());
    for (const auto& sub : id_dirs) {
        const int id = std::stoi(sub.filename().string().substr(9));
        for (int bin = 0; bin < kViewCount; ++bin) {
            const auto file = sub / ("view_" + std::to_string(bin) + ".png");
            if (!std::filesystem::exists(file)) {
                continue;
            }
            images.push_back(read_png(file));
            views.push_back(bin);
            identities.push_back(id);
        }
    }
    if (images.empty()) {
        throw ConfigError("corpus " + dir.string() + " contains no images");
    }
    return LabeledCorpus(torch::stack(images), std::move(views), std::move(identities));
}

torch::Tensor fit_image(const torch::Tensor& chw, int image_size)
{
    const int64_t h = chw.size(1);
    const int64_t w = chw.size(2);
    if (h == image_size && w == image_size) {
        return chw;
    }
    const int64_t side = std::min(h, w);
    if (side < image_size) {
        throw DomainError("image smaller than the target size");
    }
    auto square = chw.narrow(1, (h - side) / 2, side).narrow(2, (w - side) / 2, side);
    if (side == image_size) {
        return square.contiguous();
    }
    namespace F = torch::nn::functional;
    auto resized = F::interpolate(square.unsqueeze(0), F::InterpolateFuncOptions()
                                                          .size(std::vector<int64_t>{image_size, image_size})
                                                          .mode(torch::kArea));
    return resized.squeeze(0).clamp(-1.0, 1.0).contiguous();
}

std::variant<LabeledCorpus, UnlabeledCorpus> load_folder(const std::filesystem::path& dir,
                                                         const std::optional<std::filesystem::path>& labels, int image_size)
{
    if (!std::filesystem::is_directory(dir)) {
        throw ConfigError("not a directory: " + dir.string());
    }
    std::map<std::string, std::pair<int, double>> label_map;
    if (labels) {
        std::ifstream in(*labels);
        if (!in) {
            throw ConfigError("cannot read labels file " + labels->string());
        }
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            std::istringstream fields(line);
            std::string name;
            std::string id;
            std::string yaw;
            if (!std::getline(fields, name, '\t') || !std::getline(fields, id, '\t') || !std::getline(fields, yaw)) {
                throw ConfigError("malformed labels line: " + line);
            }
            label_map[name] = {std::stoi(id), std::stod(yaw)};
        }
    }

    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());

    std::vector<torch::Tensor> images;
    std::vector<int> views;
    std::vector<int> identities;
    for (const auto& file : files) {
        const auto name = file.filename().string();
        std::optional<std::pair<int, double>> label;
        if (labels) {
            const auto it = label_map.find(name);
            if (it == label_map.end()) {
                std::cerr << "warning: " << name << " has no label entry, skipped\n";
                continue;
            }
            label = it->second;
        }
        try {
            auto img = fit_image(read_png(file), image_size);
            int bin = 0;
            if (label) {
                bin = view_bin_of_angle(label->second);
            }
            images.push_back(img);
            views.push_back(bin);
            identities.push_back(label ? label->first : 0);
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping " << name << ": " << e.what() << "\n";
        }
    }
    if (images.empty()) {
        throw ConfigError("no readable images in " + dir.string());
    }
    auto stacked = torch::stack(images);
    if (labels) {
        return LabeledCorpus(stacked, std::move(views), std::move(identities));
    }
    return UnlabeledCorpus(stacked);
}

} // namespace crgan
