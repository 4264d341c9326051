import click


class NaturalOrderGroup(click.Group):
    """정의한 순서대로 하위 명령을 나열합니다."""

    def list_commands(self, ctx):
        return self.commands.keys()


class KeyValueType(click.ParamType):
    """--set key=value 인자."""

    name = "key=value"

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        key, sep, raw = value.partition("=")
        if not sep or not key.strip():
            self.fail(f"{value!r} is not in key=value form", param, ctx)
        return key.strip(), raw


class UnitFloat(click.ParamType):
    """[0, 1) 구간 실수 (축약률 등)."""

    name = "rate"

    def convert(self, value, param, ctx):
        try:
            number = float(value)
        except (TypeError, ValueError):
            self.fail(f"{value!r} is not a number", param, ctx)
        if not 0.0 <= number < 1.0:
            self.fail(f"{number} is not in [0, 1)", param, ctx)
        return number
