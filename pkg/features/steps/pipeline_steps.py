# pylint: disable=function-redefined, missing-function-docstring
# flake8: noqa
"""
Pipeline Steps

Steps file for pipeline.feature. Commands run through the Flask CLI
runner against the scenario workspace.
"""
import os
import shlex
from behave import when, then
from compare import expect
from evasionlab.models import CorpusSample


def run(context, command):
    args = shlex.split(command) + ["--workspace", context.workspace]
    context.result = context.runner.invoke(args=args)


@when('I run "{command}" on the desk corpus')
def step_impl(context, command):
    benign = os.path.join(context.corpus, "benign")
    malicious = os.path.join(context.corpus, "malicious")
    run(context, f"{command} --benign {benign} --malicious {malicious}")
    expect(context.result.exit_code).to_equal(0)

@when('I run "{command}"')
def step_impl(context, command):
    run(context, command)

@then('the command should succeed')
def step_impl(context):
    assert context.result.exit_code == 0, context.result.output

@then('the command should fail with exit code {code:d}')
def step_impl(context, code):
    expect(context.result.exit_code).to_equal(code)

@then('the output should contain "{text}"')
def step_impl(context, text):
    assert text in context.result.output, context.result.output

@then('the workspace should contain "{name}"')
def step_impl(context, name):
    assert os.path.isfile(os.path.join(context.workspace, name))

@then('the catalog should hold {count:d} samples')
def step_impl(context, count):
    expect(len(CorpusSample.all())).to_equal(count)
