# Generated by Django 5.2.8 on 2026-10-18 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('method', models.CharField(choices=[('esp', 'Surrogate-assisted prescription'), ('de', 'Direct evolution')], max_length=8)),
                ('domain', models.CharField(choices=[('function', 'Function approximation'), ('cartpole', 'Cart-pole'), ('flappy', 'Flappy side-scroller')], max_length=16)),
                ('seed', models.PositiveIntegerField()),
                ('archive_path', models.CharField(max_length=500, unique=True)),
                ('episodes_consumed', models.PositiveIntegerField(default=0)),
                ('final_true_performance', models.FloatField(blank=True, null=True)),
                ('best_real_fitness', models.FloatField(blank=True, null=True)),
                ('episodes_to_target', models.PositiveIntegerField(blank=True, null=True)),
                ('config', models.JSONField(default=dict)),
            ],
            options={
                'ordering': ('domain', 'method', 'seed'),
                'indexes': [models.Index(fields=['domain', 'method'], name='esp_run_domain_method_idx')],
            },
        ),
    ]
