import argparse
import inspect
import typing
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import typing_inspect
from docstring_parser import parse_from_object

from instance_retrieval.utils import to_kebab_case

SCALAR_TYPES = (str, int, float, Path)


class ArgumentMapper:
    """
    Maps the typed parameters of a function onto argparse arguments.

    Parameters without a default become positional arguments, the rest become
    `--kebab-case` options. Help text comes from the function's docstring.
    """

    def __init__(self, skip: Tuple[str, ...] = ("context",), dest_prefix: str = ""):
        self.skip = skip
        self.dest_prefix = dest_prefix

    def map_function(self, function: Callable, parser: argparse.ArgumentParser) -> Dict[str, str]:
        """
        Add one argument per parameter of `function` to `parser`.

        :return: Mapping of argparse dest to parameter name.
        """
        hints = typing.get_type_hints(function)
        descriptions = {param.arg_name: param.description for param in parse_from_object(function).params}
        dests = {}
        for name, parameter in inspect.signature(function).parameters.items():
            if name in self.skip or parameter.kind in (parameter.VAR_POSITIONAL, parameter.VAR_KEYWORD):
                continue
            if name not in hints:
                raise TypeError(f"parameter '{name}' of '{function.__name__}' has no type annotation")
            dest = self.dest_prefix + name
            flags, kwargs = self.map_parameter(name, hints[name], parameter.default, descriptions.get(name))
            if flags:
                parser.add_argument(*flags, dest=dest, **kwargs)
            else:
                parser.add_argument(dest, **kwargs)
            dests[dest] = name
        return dests

    def map_parameter(self, name: str, type_: Any, default: Any, description: Optional[str] = None) -> Tuple[List[str], Dict[str, Any]]:
        required = default is inspect.Parameter.empty
        kwargs: Dict[str, Any] = {"help": description}
        nullable = False

        if typing_inspect.is_union_type(type_):
            union_args = [arg for arg in typing_inspect.get_args(type_, evaluate=True) if arg is not type(None)]
            nullable = len(union_args) < len(typing_inspect.get_args(type_, evaluate=True))
            if len(union_args) != 1:
                raise TypeError(f"cannot map union type {type_} of parameter '{name}' to an argument")
            type_ = union_args[0]

        if type_ is bool:
            flag = f"--{to_kebab_case(name)}"
            if required:
                raise TypeError(f"boolean parameter '{name}' needs a default")
            if default is False and not nullable:
                kwargs["action"] = "store_true"
            else:
                kwargs["action"] = argparse.BooleanOptionalAction
            kwargs["default"] = default
            return [flag], kwargs

        if typing_inspect.is_literal_type(type_):
            choices = list(typing_inspect.get_args(type_, evaluate=True))
            kwargs["choices"] = choices
            kwargs["type"] = type(choices[0])
        elif typing_inspect.get_origin(type_) in (list, tuple):
            item_types = [arg for arg in typing_inspect.get_args(type_, evaluate=True) if arg is not Ellipsis]
            if len(set(item_types)) != 1 or item_types[0] not in SCALAR_TYPES:
                raise TypeError(f"cannot map sequence type {type_} of parameter '{name}' to an argument")
            kwargs["type"] = item_types[0]
            kwargs["nargs"] = "+"
        elif inspect.isclass(type_) and issubclass(type_, SCALAR_TYPES):
            kwargs["type"] = type_
        else:
            raise TypeError(f"cannot map type {type_} of parameter '{name}' to an argument")

        if required:
            return [], kwargs
        kwargs["default"] = default
        return [f"--{to_kebab_case(name)}"], kwargs


def function_summary(function: Callable) -> Optional[str]:
    return parse_from_object(function).short_description
