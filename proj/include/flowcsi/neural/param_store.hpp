// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FLOWCSI_NEURAL_PARAM_STORE_HPP
#define FLOWCSI_NEURAL_PARAM_STORE_HPP

#include "flowcsi/binary_io.hpp"
#include "flowcsi/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace flowcsi::nn {

// Named real arrays. Names are unique and shapes are fixed once added.
class ParamStore {
public:
    Index add(const std::string& name, RMat init) {
        if (index_.count(name)) throw InvalidConfig("duplicate parameter name: " + name);
        const Index id = static_cast<Index>(values_.size());
        index_.emplace(name, id);
        names_.push_back(name);
        values_.push_back(std::move(init));
        return id;
    }

    Index index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidConfig("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return values_.size(); }
    const std::string& name(Index i) const { return names_.at(static_cast<std::size_t>(i)); }
    const RMat& value(Index i) const { return values_.at(static_cast<std::size_t>(i)); }
    RMat& value(Index i) { return values_.at(static_cast<std::size_t>(i)); }
    const RMat& value(const std::string& name) const { return value(index_of(name)); }
    RMat& value(const std::string& name) { return value(index_of(name)); }

    void assign(Index i, const RMat& v) {
        RMat& dst = value(i);
        if (dst.rows() != v.rows() || dst.cols() != v.cols())
            throw DimensionMismatch("shape change for parameter " + name(i));
        dst = v;
    }

    Index total_count() const {
        Index n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    bool same_layout(const ParamStore& o) const {
        if (o.size() != size()) return false;
        for (std::size_t i = 0; i < values_.size(); ++i)
            if (names_[i] != o.names_[i] || values_[i].rows() != o.values_[i].rows() ||
                values_[i].cols() != o.values_[i].cols())
                return false;
        return true;
    }

    bool operator==(const ParamStore& o) const { return names_ == o.names_ && values_ == o.values_; }

    void write(std::ostream& os) const {
        io::put_u32(os, static_cast<std::uint32_t>(values_.size()));
        for (std::size_t i = 0; i < values_.size(); ++i) {
            io::put_string(os, names_[i]);
            io::put_matrix(os, values_[i]);
        }
    }

    static ParamStore read(std::istream& is) {
        ParamStore ps;
        const std::uint32_t n = io::get_u32(is);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = io::get_string(is);
            ps.add(name, io::get_matrix(is));
        }
        return ps;
    }

    // Overwrite values from a store with the same layout.
    void load_values(const ParamStore& o) {
        if (!same_layout(o)) throw DimensionMismatch("parameter layout mismatch");
        values_ = o.values_;
    }

private:
    std::map<std::string, Index> index_;
    std::vector<std::string> names_;
    std::vector<RMat> values_;
};

// Gradient buffers aligned with a ParamStore.
using Gradients = std::vector<RMat>;

inline Gradients zero_gradients(const ParamStore& ps) {
    Gradients g;
    g.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const RMat& v = ps.value(static_cast<Index>(i));
        g.push_back(RMat::Zero(v.rows(), v.cols()));
    }
    return g;
}

}  // namespace flowcsi::nn

#endif  // FLOWCSI_NEURAL_PARAM_STORE_HPP
