######################################################################
# Copyright 2016, 2023 John J. Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
######################################################################

# pylint: disable=function-redefined, missing-function-docstring
# flake8: noqa
"""
Catalog Steps

Steps file for catalog.feature
"""
import os
from behave import given, when, then
from compare import expect
from evasionlab.models import CorpusSample
from evasionlab.synthetic import build_desk_corpus

# HTTP Return Codes
HTTP_200_OK = 200
HTTP_204_NO_CONTENT = 204

OCTET_STREAM = "application/octet-stream"


@given('the following samples')
def step_impl(context):
    """ Clear the catalog and load the table into it """
    for sample in CorpusSample.all():
        sample.delete()
    for row in context.table:
        CorpusSample.upsert(dict(zip(row.headings, row.cells)))

@given('a desk corpus of {benign:d} benign and {malicious:d} malicious files')
def step_impl(context, benign, malicious):
    context.corpus = os.path.join(context.workspace, "corpus")
    context.corpus_files = build_desk_corpus(context.corpus, benign=benign, malicious=malicious, seed=21)

@when('I visit the "Home Page"')
def step_impl(context):
    context.resp = context.client.get("/")
    expect(context.resp.status_code).to_equal(HTTP_200_OK)

@then('I should see "{message}" in the name')
def step_impl(context, message):
    expect(context.resp.get_json()["name"]).to_equal(message)

@then('the service should be healthy')
def step_impl(context):
    resp = context.client.get("/health")
    expect(resp.status_code).to_equal(HTTP_200_OK)
    expect(resp.get_json()["message"]).to_equal("OK")

@when('I list the samples')
def step_impl(context):
    context.resp = context.client.get("/samples")
    expect(context.resp.status_code).to_equal(HTTP_200_OK)

@when('I list the "{label}" samples')
def step_impl(context, label):
    context.resp = context.client.get("/samples", query_string={"label": label})
    expect(context.resp.status_code).to_equal(HTTP_200_OK)

@then('I should see {count:d} samples')
def step_impl(context, count):
    expect(len(context.resp.get_json())).to_equal(count)

@then('every sample should be labelled "{label}"')
def step_impl(context, label):
    for sample in context.resp.get_json():
        expect(sample["label"]).to_equal(label)

@then('I should not see the sample "{sample_id}"')
def step_impl(context, sample_id):
    digests = [sample["digest"] for sample in context.resp.get_json()]
    assert not any(digest.startswith(sample_id) for digest in digests)

@when('I read the sample "{sample_id}"')
def step_impl(context, sample_id):
    context.resp = context.client.get(f"/samples/{sample_id}")
    expect(context.resp.status_code).to_equal(HTTP_200_OK)

@then('the sample should have {field} "{value}"')
def step_impl(context, field, value):
    expect(str(context.resp.get_json()[field])).to_equal(value)

@when('I delete the sample "{sample_id}"')
def step_impl(context, sample_id):
    context.resp = context.client.delete(f"/samples/{sample_id}")
    expect(context.resp.status_code).to_equal(HTTP_204_NO_CONTENT)

@when('I post the first "{label}" file to "{endpoint}"')
def step_impl(context, label, endpoint):
    data = context.corpus_files[label][0].read_bytes()
    context.resp = context.client.post(endpoint, data=data, content_type=OCTET_STREAM)
    expect(context.resp.status_code).to_equal(HTTP_200_OK)

@then('the response should be loadable')
def step_impl(context):
    data = context.resp.get_json()
    assert data["is_loadable_shape"]
    expect(data["violations"]).to_equal([])

@then('the response should have {dim:d} dimensions')
def step_impl(context, dim):
    expect(context.resp.get_json()["dim"]).to_equal(dim)
