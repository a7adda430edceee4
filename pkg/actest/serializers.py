from rest_framework import serializers

from .domain import ACTIONS, ANONYMOUS, Request, Subject
from .models import ImpactRun


class OctalPermsField(serializers.Field):
    """Permission bits given as an octal string ("0644") or an integer"""

    default_error_messages = {
        'invalid': 'Permissions must be an octal string or an integer.',
        'range': 'Permissions must be between 0000 and 0777.',
    }

    def to_internal_value(self, data):
        if isinstance(data, bool):
            self.fail('invalid')
        if isinstance(data, str):
            try:
                value = int(data, 8)
            except ValueError:
                self.fail('invalid')
        elif isinstance(data, int):
            value = data
        else:
            self.fail('invalid')
        if not 0 <= value <= 0o777:
            self.fail('range')
        return value

    def to_representation(self, value):
        return format(value, '04o')


# Production data

class FileEntrySerializer(serializers.Serializer):
    """One file of a data manifest"""

    path = serializers.CharField(max_length=4096)
    owner = serializers.CharField(max_length=255, default='root')
    group = serializers.CharField(max_length=255, default='root')
    perms = OctalPermsField(default=0o644)
    size = serializers.IntegerField(min_value=0, default=0)
    digest = serializers.CharField(max_length=128, default='', allow_blank=True)

    def validate_path(self, value):
        if not value.startswith('/'):
            raise serializers.ValidationError("File paths must be absolute")
        return value


class DataManifestSerializer(serializers.Serializer):
    """Directory snapshot: files plus tables (a JSON file name or inline rows)"""

    files = FileEntrySerializer(many=True, default=list)
    tables = serializers.DictField(child=serializers.JSONField(), default=dict)

    def validate_tables(self, value):
        for name, source in value.items():
            if isinstance(source, str):
                continue
            if not isinstance(source, list) or not all(isinstance(row, dict) for row in source):
                raise serializers.ValidationError(
                    f"Table {name} must be a file name or a list of rows"
                )
        return value


class DataDeltaSerializer(serializers.Serializer):
    """One data change shipped with a configuration change"""

    op = serializers.ChoiceField(choices=['add', 'remove', 'chmod'])
    path = serializers.CharField(max_length=4096)
    owner = serializers.CharField(max_length=255, required=False)
    group = serializers.CharField(max_length=255, required=False)
    perms = OctalPermsField(required=False)
    size = serializers.IntegerField(min_value=0, required=False)
    digest = serializers.CharField(max_length=128, required=False, allow_blank=True)

    def validate(self, data):
        if data['op'] == 'chmod' and 'perms' not in data:
            raise serializers.ValidationError("chmod needs perms")
        return data


# Requests

class RequestSerializer(serializers.Serializer):
    """An access request; the subject is a name or {name, groups}"""

    subject = serializers.JSONField(default=ANONYMOUS)
    object = serializers.CharField(max_length=4096)
    action = serializers.CharField(max_length=10)
    source_ip = serializers.IPAddressField(protocol='IPv4', default='127.0.0.1')

    def validate_subject(self, value):
        if isinstance(value, str):
            return {'name': value, 'groups': []}
        if not isinstance(value, dict) or not isinstance(value.get('name', ANONYMOUS), str):
            raise serializers.ValidationError("Subject must be a name or an object with a name")
        groups = value.get('groups') or []
        if not isinstance(groups, list):
            raise serializers.ValidationError("Subject groups must be a list")
        return {'name': value.get('name') or ANONYMOUS, 'groups': groups}

    def validate_action(self, value):
        if value.upper() not in ACTIONS:
            raise serializers.ValidationError(f"Action must be one of {', '.join(ACTIONS)}")
        return value.upper()

    def validate(self, data):
        try:
            subject = Subject(data['subject']['name'], frozenset(data['subject']['groups']))
            return Request(subject, data['object'], data['action'], data['source_ip'])
        except ValueError as e:
            raise serializers.ValidationError(str(e))


class TraceTupleSerializer(serializers.Serializer):
    """A request with the config that allows it and the one that denies it"""

    request = RequestSerializer()
    cfg_allow = serializers.CharField(max_length=4096)
    cfg_deny = serializers.CharField(max_length=4096)


class TraceTupleFileSerializer(serializers.Serializer):
    tuples = TraceTupleSerializer(many=True, allow_empty=False)


class SynthesisSpecSerializer(serializers.Serializer):
    """Sources of the subjects x objects x actions x IPs product"""

    subjects = serializers.JSONField()
    include_anonymous = serializers.BooleanField(default=False)
    objects = serializers.JSONField()
    actions = serializers.ListField(child=serializers.CharField(max_length=10), default=list)
    ips = serializers.ListField(child=serializers.IPAddressField(protocol='IPv4'), default=list)
    scope = serializers.ChoiceField(choices=['ALL', 'CHANGE_RELATED'], default='ALL')

    def validate_subjects(self, value):
        if isinstance(value, dict):
            if not isinstance(value.get('table'), str):
                raise serializers.ValidationError("Subject source must be {\"table\": name} or a list")
            return value
        if not isinstance(value, list):
            raise serializers.ValidationError("Subject source must be {\"table\": name} or a list")
        for item in value:
            if not isinstance(item, (str, dict)):
                raise serializers.ValidationError("Subjects are names or {name, groups} objects")
        return value

    def validate_objects(self, value):
        if isinstance(value, dict):
            if not isinstance(value.get('root'), str):
                raise serializers.ValidationError("Object source must be {\"root\": path} or a list")
            return value
        if not isinstance(value, list) or not all(isinstance(item, str) for item in value):
            raise serializers.ValidationError("Object source must be {\"root\": path} or a list of paths")
        return value

    def validate_actions(self, value):
        verbs = [verb.upper() for verb in value]
        unknown = [verb for verb in verbs if verb not in ACTIONS]
        if unknown:
            raise serializers.ValidationError(f"Unsupported actions: {', '.join(unknown)}")
        return verbs or ['GET']

    def create(self, validated_data):
        from .reqgen import Scope, SynthesisSpec

        subjects_source = validated_data['subjects']
        objects_source = validated_data['objects']
        subjects = []
        if isinstance(subjects_source, list):
            for item in subjects_source:
                if isinstance(item, str):
                    item = {'name': item}
                subjects.append(Subject(item.get('name') or ANONYMOUS, frozenset(item.get('groups') or ())))
        return SynthesisSpec(
            subjects=tuple(subjects),
            subjects_table=subjects_source.get('table') if isinstance(subjects_source, dict) else None,
            include_anonymous=validated_data['include_anonymous'],
            objects=tuple(objects_source) if isinstance(objects_source, list) else (),
            objects_root=objects_source.get('root') if isinstance(objects_source, dict) else None,
            actions=tuple(validated_data['actions']),
            ips=tuple(validated_data['ips']),
            scope=Scope(validated_data['scope']),
        )


# Triage

class RuleSetSerializer(serializers.Serializer):
    """Triage rules: dot-prefixed names, suffixes, substrings, dangerous methods"""

    dot_prefix = serializers.BooleanField(default=True)
    suffixes = serializers.ListField(child=serializers.CharField(max_length=64), default=list)
    substrings = serializers.ListField(child=serializers.CharField(max_length=255), default=list)
    methods = serializers.ListField(child=serializers.CharField(max_length=10), default=list)

    def validate_suffixes(self, value):
        for suffix in value:
            if not suffix.startswith('.'):
                raise serializers.ValidationError(f"Suffix {suffix!r} must start with a dot")
        return value

    def validate_methods(self, value):
        verbs = [verb.upper() for verb in value]
        unknown = [verb for verb in verbs if verb not in ACTIONS]
        if unknown:
            raise serializers.ValidationError(f"Unknown methods: {', '.join(unknown)}")
        return verbs

    def create(self, validated_data):
        from .report_service import RuleSet

        return RuleSet(
            dot_prefix=validated_data['dot_prefix'],
            suffixes=tuple(validated_data['suffixes']),
            substrings=tuple(validated_data['substrings']),
            methods=tuple(validated_data['methods']),
        )


class TriageRequestSerializer(serializers.Serializer):
    """Serializer for the stateless triage endpoint"""

    entries = serializers.ListField(child=serializers.DictField(), allow_empty=True)
    rules = serializers.JSONField(required=False)


# Runs

class RunManifestSerializer(serializers.Serializer):
    """Inputs of one impact run; paths are relative to the manifest"""

    program = serializers.CharField(max_length=4096)
    config_old = serializers.CharField(max_length=4096)
    config_new = serializers.CharField(max_length=4096)
    data = serializers.CharField(max_length=4096)
    data_delta = serializers.CharField(max_length=4096, required=False)
    requests = serializers.DictField(child=serializers.CharField(max_length=4096))
    rules = serializers.CharField(max_length=4096, required=False)
    workers = serializers.IntegerField(min_value=1, max_value=256, required=False)
    output = serializers.CharField(max_length=4096, required=False)
    trim = serializers.ChoiceField(choices=['none', 'advanced', 'strawman'], default='none')
    tuples = serializers.CharField(max_length=4096, required=False)

    def validate_requests(self, value):
        sources = set(value) & {'logs', 'synthesize', 'corpus'}
        if len(sources) != 1 or len(value) != 1:
            raise serializers.ValidationError(
                "Exactly one request source is required: logs, synthesize or corpus"
            )
        return value

    def validate(self, data):
        if data['trim'] == 'advanced' and not data.get('tuples'):
            raise serializers.ValidationError("Advanced trimming needs trace tuples")
        return data


class ImpactRunSerializer(serializers.ModelSerializer):
    """Serializer for stored runs (list view)"""

    class Meta:
        model = ImpactRun
        fields = [
            'id', 'manifest_path', 'started_at', 'finished_at', 'request_count',
            'impact_count', 'dangerous_count', 'exit_code'
        ]


class ImpactRunDetailSerializer(serializers.ModelSerializer):
    """Serializer for a stored run including its report"""

    class Meta:
        model = ImpactRun
        fields = ImpactRunSerializer.Meta.fields + ['report']
